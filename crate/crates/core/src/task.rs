//! JSON-structured model tasks: building retrieval and editing inputs under a
//! token budget, parsing the models' JSON answers, and rendering the
//! rationalization prompts used to collect reasoning for training targets.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::repo::{normalize_path, NumberedText};
use crate::skeleton::FileDoc;

pub const DEFAULT_MAX_TOKENS: usize = 65_536;
pub const RETRIEVAL_SCHEMA: &str = "retrieval.files_to_edit.v1";
pub const EDITING_SCHEMA: &str = "editing.structured_edit.v1";

pub const COT_SYSTEM_PROMPT: &str = include_str!("prompts/cot_system.txt");
pub const COT_USER_TEMPLATE: &str = include_str!("prompts/cot_user.txt");

const RETRIEVAL_INSTRUCTION: &str = "Given the issue, the repository readme and the documentation \
of candidate files (module docstrings, class headers, method signatures and abridged function \
bodies), identify the files that must be edited to resolve the issue.";
const RETRIEVAL_OUTPUT: &str = "Respond with a single JSON object of the form \
{\"files_to_edit\": [\"<relative path>\", ...]} listing the files to edit, most relevant first. \
Output nothing else.";
const EDITING_INSTRUCTION: &str = "Given the issue and the full content of the relevant files, \
where every line is prefixed with its line number, reason about the cause of the issue and \
produce the code modifications that resolve it.";
const EDITING_OUTPUT: &str = "Respond with a single JSON object of the form {\"reasoning\": \
\"<step-by-step reasoning>\", \"edits\": [{\"file\": \"<relative path>\", \
\"code_snippet_to_be_modified\": \"<original lines, each prefixed with its line number and one \
space>\", \"edited_code_snippet\": \"<replacement code without line numbers>\"}]}. Each original \
snippet must be a contiguous range of lines copied exactly from the file. Output nothing else.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid model output: {0}")]
    InvalidOutput(String),
    #[error("context budget exhausted: {needed} tokens needed, {max} allowed")]
    BudgetExhausted { needed: usize, max: usize },
}

/// Token counting strategy used for budget enforcement.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
    fn id(&self) -> &str;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteQuarterCounter;

impl TokenCounter for ByteQuarterCounter {
    fn count(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }

    fn id(&self) -> &str {
        "bytes/4"
    }
}

/// Default token estimate: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    ByteQuarterCounter.count(text)
}

#[derive(Clone)]
pub struct ContextBudget {
    pub max_tokens: usize,
    counter: Arc<dyn TokenCounter>,
}

impl fmt::Debug for ContextBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContextBudget")
            .field("max_tokens", &self.max_tokens)
            .field("counter", &self.counter.id())
            .finish()
    }
}

impl Default for ContextBudget {
    fn default() -> Self {
        ContextBudget::new(DEFAULT_MAX_TOKENS)
    }
}

impl ContextBudget {
    pub fn new(max_tokens: usize) -> Self {
        assert!(max_tokens > 0, "context budget must be positive");
        ContextBudget {
            max_tokens,
            counter: Arc::new(ByteQuarterCounter),
        }
    }

    pub fn with_counter(max_tokens: usize, counter: Arc<dyn TokenCounter>) -> Self {
        assert!(max_tokens > 0, "context budget must be positive");
        ContextBudget { max_tokens, counter }
    }

    pub fn counter_id(&self) -> &str {
        self.counter.id()
    }

    pub fn estimate(&self, text: &str) -> usize {
        self.counter.count(text)
    }

    pub fn fits(&self, text: &str) -> bool {
        self.estimate(text) <= self.max_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Retrieval,
    Editing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonTask {
    pub task_kind: TaskKind,
    pub input_object: Value,
    pub expected_schema: String,
    /// Paths of the documents or files that made it into the input.
    pub included: Vec<String>,
    pub warnings: Vec<String>,
}

impl JsonTask {
    /// Canonical serialization (object keys sorted) sent to the model.
    pub fn serialized(&self) -> String {
        serde_json::to_string(&self.input_object).expect("json value serializes")
    }

    pub fn included_count(&self) -> usize {
        self.included.len()
    }
}

fn require_issue(issue: &str) -> Result<(), TaskError> {
    if issue.trim().is_empty() {
        return Err(TaskError::Validation("issue text is empty".into()));
    }
    Ok(())
}

fn retrieval_object(issue: &str, readme: Option<&str>, docs: &[&str]) -> Value {
    let mut input = json!({
        "issue": issue,
        "file_documentations": docs,
    });
    if let Some(readme) = readme {
        input["readme"] = Value::String(readme.to_string());
    }
    json!({
        "input": input,
        "instruction": RETRIEVAL_INSTRUCTION,
        "output_control": {
            "format": "json",
            "schema": {"files_to_edit": ["string"]},
            "description": RETRIEVAL_OUTPUT,
        },
    })
}

/// Builds the retrieval task. Skeletons are appended in rank order and the
/// first one that would push the serialized input past the budget stops the
/// list. A readme that alone overflows the budget is dropped with a warning.
pub fn build_retrieval_input(
    issue: &str,
    readme: Option<&str>,
    ranked_docs: &[&FileDoc],
    budget: &ContextBudget,
) -> Result<JsonTask, TaskError> {
    require_issue(issue)?;
    let mut warnings = Vec::new();
    let mut readme = readme;
    let cost = |readme: Option<&str>, docs: &[&str]| {
        budget.estimate(&serde_json::to_string(&retrieval_object(issue, readme, docs)).unwrap())
    };
    if readme.is_some() && cost(readme, &[]) > budget.max_tokens {
        warnings.push("readme dropped: exceeds context budget".to_string());
        readme = None;
    }
    let base = cost(readme, &[]);
    if base > budget.max_tokens {
        return Err(TaskError::BudgetExhausted {
            needed: base,
            max: budget.max_tokens,
        });
    }
    let rendered: Vec<&str> = ranked_docs.iter().map(|d| d.rendered.as_str()).collect();
    let mut included = 0;
    while included < rendered.len() && cost(readme, &rendered[..=included]) <= budget.max_tokens {
        included += 1;
    }
    if included < rendered.len() {
        warnings.push(format!(
            "{} of {} file documentations omitted by context budget",
            rendered.len() - included,
            rendered.len()
        ));
    }
    Ok(JsonTask {
        task_kind: TaskKind::Retrieval,
        input_object: retrieval_object(issue, readme, &rendered[..included]),
        expected_schema: RETRIEVAL_SCHEMA.to_string(),
        included: ranked_docs[..included].iter().map(|d| d.path.clone()).collect(),
        warnings,
    })
}

/// Options mirroring the editing-input ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditingInputOptions<'a> {
    pub line_numbers: bool,
    pub readme: Option<&'a str>,
}

impl Default for EditingInputOptions<'_> {
    fn default() -> Self {
        EditingInputOptions {
            line_numbers: true,
            readme: None,
        }
    }
}

fn editing_object(issue: &str, readme: Option<&str>, files: &[(&str, String)]) -> Value {
    let files: Vec<Value> = files
        .iter()
        .map(|(path, content)| json!({"path": path, "content": content}))
        .collect();
    let mut input = json!({"issue": issue, "files": files});
    if let Some(readme) = readme {
        input["readme"] = Value::String(readme.to_string());
    }
    json!({
        "input": input,
        "instruction": EDITING_INSTRUCTION,
        "output_control": {
            "format": "json",
            "schema": {
                "reasoning": "string",
                "edits": [{
                    "file": "string",
                    "code_snippet_to_be_modified": "string",
                    "edited_code_snippet": "string",
                }],
            },
            "description": EDITING_OUTPUT,
        },
    })
}

/// Builds the editing task over whole files. Files that do not fit are
/// dropped from the end of the list, never cut mid-file.
pub fn build_editing_input(
    issue: &str,
    files: &[(String, NumberedText)],
    budget: &ContextBudget,
    options: EditingInputOptions<'_>,
) -> Result<JsonTask, TaskError> {
    require_issue(issue)?;
    if files.is_empty() {
        return Err(TaskError::Validation("no files to edit".into()));
    }
    let rendered: Vec<(&str, String)> = files
        .iter()
        .map(|(p, text)| {
            let content = if options.line_numbers {
                text.render()
            } else {
                text.to_content()
            };
            (p.as_str(), content)
        })
        .collect();
    let mut warnings = Vec::new();
    let mut kept = rendered.len();
    let mut cost = 0;
    while kept > 0 {
        let object = editing_object(issue, options.readme, &rendered[..kept]);
        cost = budget.estimate(&serde_json::to_string(&object).unwrap());
        if cost <= budget.max_tokens {
            break;
        }
        warnings.push(format!(
            "file {} dropped: exceeds context budget",
            rendered[kept - 1].0
        ));
        kept -= 1;
    }
    if kept == 0 {
        return Err(TaskError::BudgetExhausted {
            needed: cost,
            max: budget.max_tokens,
        });
    }
    Ok(JsonTask {
        task_kind: TaskKind::Editing,
        input_object: editing_object(issue, options.readme, &rendered[..kept]),
        expected_schema: EDITING_SCHEMA.to_string(),
        included: rendered[..kept].iter().map(|(p, _)| p.to_string()).collect(),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalAnswer {
    pub files: Vec<String>,
}

impl RetrievalAnswer {
    pub fn to_json(&self) -> String {
        json!({"files_to_edit": self.files}).to_string()
    }
}

/// Accepts a bare JSON document, optionally wrapped in one markdown code fence.
fn parse_json_document(text: &str) -> Result<Value, TaskError> {
    let mut body = text.trim();
    if let Some(rest) = body.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        body = rest.strip_suffix("```").unwrap_or(rest).trim();
    }
    serde_json::from_str(body).map_err(|e| TaskError::InvalidOutput(format!("malformed JSON: {e}")))
}

pub fn parse_retrieval_output(text: &str) -> Result<RetrievalAnswer, TaskError> {
    let value = parse_json_document(text)?;
    let list = value
        .get("files_to_edit")
        .and_then(Value::as_array)
        .ok_or_else(|| TaskError::InvalidOutput("missing array field files_to_edit".into()))?;
    let mut files: Vec<String> = Vec::with_capacity(list.len());
    for item in list {
        let raw = item
            .as_str()
            .ok_or_else(|| TaskError::InvalidOutput("files_to_edit entries must be strings".into()))?;
        let path = normalize_path(raw)
            .map_err(|_| TaskError::InvalidOutput(format!("invalid path {raw:?}")))?;
        if !files.contains(&path) {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(TaskError::InvalidOutput("files_to_edit is empty".into()));
    }
    Ok(RetrievalAnswer { files })
}

/// One replacement: a line-numbered original snippet and its unnumbered
/// replacement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditBlock {
    pub file: String,
    #[serde(rename = "code_snippet_to_be_modified")]
    pub original_numbered: String,
    #[serde(rename = "edited_code_snippet")]
    pub modified: String,
}

impl EditBlock {
    /// Builds a block from a starting line number and original/modified lines.
    pub fn from_lines(file: &str, start_line: usize, original: &[String], modified: &[String]) -> Self {
        let original_numbered = original
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{} {}", start_line + i, l))
            .collect::<Vec<_>>()
            .join("\n");
        EditBlock {
            file: file.to_string(),
            original_numbered,
            modified: join_snippet_lines(modified),
        }
    }

    /// The numbered snippet as `(line number, text)` pairs; numbers must be
    /// consecutive and start at 1 or above.
    pub fn numbered_lines(&self) -> Result<Vec<(usize, String)>, TaskError> {
        parse_numbered_snippet(&self.original_numbered)
    }

    pub fn modified_lines(&self) -> Vec<String> {
        split_snippet_lines(&self.modified)
    }
}

/// Splits a snippet into lines. One trailing newline is a terminator, not an
/// extra empty line: `"a\n"` and `"a"` are one line, `"\n"` is one empty
/// line, `""` is no lines.
pub fn split_snippet_lines(text: &str) -> Vec<String> {
    if text.is_empty() {
        return Vec::new();
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n').map(str::to_string).collect()
}

/// Inverse of [`split_snippet_lines`].
pub fn join_snippet_lines(lines: &[String]) -> String {
    let mut out = lines.join("\n");
    if lines.last().is_some_and(|l| l.is_empty()) {
        out.push('\n');
    }
    out
}

pub fn parse_numbered_snippet(text: &str) -> Result<Vec<(usize, String)>, TaskError> {
    let lines = split_snippet_lines(text);
    if lines.is_empty() {
        return Err(TaskError::InvalidOutput("original snippet is empty".into()));
    }
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        let digits = line.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return Err(TaskError::InvalidOutput(format!(
                "snippet line lacks a line number: {line:?}"
            )));
        }
        let number: usize = line[..digits]
            .parse()
            .map_err(|_| TaskError::InvalidOutput(format!("bad line number in {line:?}")))?;
        let text = match &line[digits..] {
            "" => "",
            rest => rest.strip_prefix(' ').ok_or_else(|| {
                TaskError::InvalidOutput(format!("line number not followed by a space: {line:?}"))
            })?,
        };
        if number == 0 {
            return Err(TaskError::InvalidOutput("line numbers start at 1".into()));
        }
        if let Some((prev, _)) = out.last() {
            if number != prev + 1 {
                return Err(TaskError::InvalidOutput(format!(
                    "non-consecutive line numbers {prev} and {number}"
                )));
            }
        }
        out.push((number, text.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StructuredEdit {
    pub reasoning: String,
    pub edits: Vec<EditBlock>,
}

impl StructuredEdit {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("structured edit serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("structured edit serializes")
    }
}

pub fn parse_editing_output(text: &str) -> Result<StructuredEdit, TaskError> {
    let value = parse_json_document(text)?;
    let edit: StructuredEdit = serde_json::from_value(value)
        .map_err(|e| TaskError::InvalidOutput(format!("editing schema mismatch: {e}")))?;
    if edit.edits.is_empty() {
        return Err(TaskError::InvalidOutput("edits list is empty".into()));
    }
    for block in &edit.edits {
        normalize_path(&block.file)
            .map_err(|_| TaskError::InvalidOutput(format!("invalid path {:?}", block.file)))?;
        block.numbered_lines()?;
    }
    Ok(edit)
}

/// Renders the numbered gold files as one markdown block per file.
pub fn render_file_contents(files: &[(String, NumberedText)]) -> String {
    files
        .iter()
        .map(|(path, text)| format!("## File: `{path}`\n```\n{}\n```", text.render()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Fills the rationalization prompt. Placeholders are substituted in one
/// pass so text inside the inputs is never re-expanded.
pub fn render_cot_prompt(
    issue: &str,
    gold_files: &[(String, NumberedText)],
    gold_edit: &StructuredEdit,
) -> Result<(String, String), TaskError> {
    require_issue(issue)?;
    if gold_files.is_empty() {
        return Err(TaskError::Validation("no file content for the prompt".into()));
    }
    if gold_edit.edits.is_empty() {
        return Err(TaskError::Validation("gold edit has no blocks".into()));
    }
    let content = render_file_contents(gold_files);
    let target = gold_edit.to_json_pretty();
    let slots = [
        ("{problem_statement}", issue),
        ("{content}", content.as_str()),
        ("{target}", target.as_str()),
    ];
    let mut out = String::with_capacity(COT_USER_TEMPLATE.len() + content.len() + target.len());
    let mut rest = COT_USER_TEMPLATE;
    while let Some((pos, (name, value))) = slots
        .iter()
        .filter_map(|slot| rest.find(slot.0).map(|p| (p, slot)))
        .min_by_key(|(p, _)| *p)
    {
        out.push_str(&rest[..pos]);
        out.push_str(value);
        rest = &rest[pos + name.len()..];
    }
    out.push_str(rest);
    Ok((COT_SYSTEM_PROMPT.to_string(), out))
}
