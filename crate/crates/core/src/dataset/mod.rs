//! Training-data curation: filtering raw issue/patch pairs, building
//! retrieval and editing examples, rationalization requests, and corpus
//! statistics.

pub mod ingest;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bm25::{Bm25Params, DocSource, SnapshotIndex, DEFAULT_TOP_K};
use crate::edit::{apply_patch, gold_patch_to_structured_edit, parse_unified_patch, PatchSummary, UnifiedPatch};
use crate::repo::{number_lines, NumberedText, RepoError, RepoSnapshot};
use crate::task::{
    build_editing_input, build_retrieval_input, render_cot_prompt, ContextBudget,
    EditingInputOptions, JsonTask, RetrievalAnswer, StructuredEdit, TaskError, TaskKind,
    DEFAULT_MAX_TOKENS,
};

pub const DEFAULT_MAX_EDITED_FILES: usize = 3;
pub const MODIFIED_LINE_BUCKET: usize = 100;
/// Sections a teacher response must contain, matched case-insensitively.
pub const REQUIRED_COT_SECTIONS: [&str; 3] = [
    "issue analysis",
    "task decomposition",
    "code localization and editing",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate instance id {0}")]
    DuplicateId(String),
    #[error("snapshot {reference} for {instance}: {source}")]
    Snapshot {
        instance: String,
        reference: String,
        source: RepoError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInstance {
    pub instance_id: String,
    pub repo_id: String,
    #[serde(alias = "problem_statement")]
    pub issue_text: String,
    /// Snapshot location, relative to the snapshot root.
    pub base_snapshot_ref: String,
    #[serde(alias = "patch")]
    pub gold_patch_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_test_commands: Option<Vec<String>>,
}

/// Reads JSONL records, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Record {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DatasetError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DatasetError::io(path, e))
}

pub fn read_raw_instances(path: &Path) -> Result<Vec<RawInstance>, DatasetError> {
    let raws: Vec<RawInstance> = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for r in &raws {
        if !seen.insert(r.instance_id.as_str()) {
            return Err(DatasetError::DuplicateId(r.instance_id.clone()));
        }
    }
    Ok(raws)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    ExcludedRepo,
    Unparseable,
    NoSourceFiles,
    TooManyFiles,
    GoldNotRetrieved,
    OverBudget,
    ApplyFailed,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::ExcludedRepo => "excluded-repo",
            DropReason::Unparseable => "unparseable",
            DropReason::NoSourceFiles => "no-source-files",
            DropReason::TooManyFiles => "too-many-files",
            DropReason::GoldNotRetrieved => "gold-not-retrieved",
            DropReason::OverBudget => "over-budget",
            DropReason::ApplyFailed => "apply-failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub max_edited_files: usize,
    pub excluded_repos: Vec<String>,
    pub top_k: usize,
    pub bm25: Bm25Params,
    pub doc_source: DocSource,
    pub context_limit: usize,
    pub include_readme_retrieval: bool,
    pub include_readme_editing: bool,
    pub line_numbers: bool,
    /// Editing examples to send for rationalization; all when unset.
    pub cot_sample_size: Option<usize>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            max_edited_files: DEFAULT_MAX_EDITED_FILES,
            excluded_repos: Vec::new(),
            top_k: DEFAULT_TOP_K,
            bm25: Bm25Params::default(),
            doc_source: DocSource::Skeleton,
            context_limit: DEFAULT_MAX_TOKENS,
            include_readme_retrieval: true,
            include_readme_editing: false,
            line_numbers: true,
            cot_sample_size: None,
            seed: 0,
        }
    }
}

/// Decides whether a raw instance enters the corpus. Checks run in a fixed
/// order and the first failure is the drop reason.
pub fn filter_instance(raw: &RawInstance, config: &DatasetConfig) -> Result<UnifiedPatch, DropReason> {
    if config.excluded_repos.contains(&raw.repo_id) {
        return Err(DropReason::ExcludedRepo);
    }
    let patch = parse_unified_patch(&raw.gold_patch_text).map_err(|_| DropReason::Unparseable)?;
    if patch.is_empty() {
        return Err(DropReason::Unparseable);
    }
    let edited = PatchSummary::of(&patch).edited_files().len();
    if edited == 0 {
        return Err(DropReason::NoSourceFiles);
    }
    if edited > config.max_edited_files {
        return Err(DropReason::TooManyFiles);
    }
    Ok(patch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub instance_id: String,
    pub kind: TaskKind,
    pub input_task: JsonTask,
    /// Serialized expected output.
    pub target: String,
}

/// JSONL form: the model input and the target.
#[derive(Serialize)]
struct ExampleRecord<'a> {
    instance_id: &'a str,
    kind: TaskKind,
    schema: &'a str,
    input: &'a Value,
    target: &'a str,
}

impl TrainingExample {
    fn record(&self) -> ExampleRecord<'_> {
        ExampleRecord {
            instance_id: &self.instance_id,
            kind: self.kind,
            schema: &self.input_task.expected_schema,
            input: &self.input_task.input_object,
            target: &self.target,
        }
    }
}

fn readme_of(snapshot: &RepoSnapshot) -> Option<&str> {
    snapshot
        .readme_path()
        .and_then(|p| snapshot.get(p))
        .map(|f| f.content.as_str())
}

/// Retrieval example: the issue plus the top-k skeletons, targeting the gold
/// non-test files. Every gold file must rank in the top k, and the issue,
/// readme and all k skeletons must fit the budget together.
pub fn build_retrieval_example(
    raw: &RawInstance,
    patch: &UnifiedPatch,
    snapshot: &RepoSnapshot,
    index: &SnapshotIndex,
    config: &DatasetConfig,
) -> Result<TrainingExample, DropReason> {
    let summary = PatchSummary::of(patch);
    let gold: Vec<String> = summary.edited_files().into_iter().map(str::to_string).collect();
    let docs = index.ranked_docs(&raw.issue_text, config.top_k);
    if gold.iter().any(|g| !docs.iter().any(|d| &d.path == g)) {
        return Err(DropReason::GoldNotRetrieved);
    }
    let readme = readme_of(snapshot).filter(|_| config.include_readme_retrieval);
    let budget = ContextBudget::new(config.context_limit);
    let task = build_retrieval_input(&raw.issue_text, readme, &docs, &budget).map_err(|_| DropReason::OverBudget)?;
    if task.included.len() < docs.len() || !task.warnings.is_empty() {
        return Err(DropReason::OverBudget);
    }
    Ok(TrainingExample {
        instance_id: raw.instance_id.clone(),
        kind: TaskKind::Retrieval,
        input_task: task,
        target: RetrievalAnswer { files: gold }.to_json(),
    })
}

/// Restriction of a patch to its non-test files.
pub fn source_part(patch: &UnifiedPatch) -> UnifiedPatch {
    UnifiedPatch {
        files: patch
            .files
            .iter()
            .filter(|f| !crate::repo::classify_test_file(f.path()))
            .cloned()
            .collect(),
    }
}

/// An editing example with the material needed for its rationalization
/// prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct EditingExample {
    pub example: TrainingExample,
    pub issue: String,
    pub files: Vec<(String, NumberedText)>,
    pub edit: StructuredEdit,
}

/// Editing example over the gold non-test files, targeting the gold patch
/// as a structured edit with empty reasoning.
pub fn build_editing_example(
    raw: &RawInstance,
    patch: &UnifiedPatch,
    snapshot: &RepoSnapshot,
    config: &DatasetConfig,
) -> Result<EditingExample, DropReason> {
    apply_patch(snapshot, patch).map_err(|_| DropReason::ApplyFailed)?;
    let source = source_part(patch);
    let edit = gold_patch_to_structured_edit(snapshot, &source).map_err(|_| DropReason::ApplyFailed)?;
    let files: Vec<(String, NumberedText)> = source
        .files
        .iter()
        .map(|f| {
            let content = snapshot.get(f.path()).map(|r| r.content.as_str()).unwrap_or("");
            (f.path().to_string(), number_lines(content))
        })
        .collect();
    let options = EditingInputOptions {
        line_numbers: config.line_numbers,
        readme: readme_of(snapshot).filter(|_| config.include_readme_editing),
    };
    let budget = ContextBudget::new(config.context_limit);
    let task = build_editing_input(&raw.issue_text, &files, &budget, options).map_err(|_| DropReason::OverBudget)?;
    if task.included.len() < files.len() {
        return Err(DropReason::OverBudget);
    }
    Ok(EditingExample {
        example: TrainingExample {
            instance_id: raw.instance_id.clone(),
            kind: TaskKind::Editing,
            input_task: task,
            target: edit.to_json(),
        },
        issue: raw.issue_text.clone(),
        files,
        edit,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotRequest {
    pub instance_id: String,
    pub system: String,
    pub user: String,
}

/// One rationalization prompt per example, in input order.
pub fn emit_cot_requests(examples: &[&EditingExample]) -> Result<Vec<CotRequest>, TaskError> {
    examples
        .iter()
        .map(|e| {
            let (system, user) = render_cot_prompt(&e.issue, &e.files, &e.edit)?;
            Ok(CotRequest {
                instance_id: e.example.instance_id.clone(),
                system,
                user,
            })
        })
        .collect()
}

/// Picks `size` examples uniformly with a seeded generator; the chosen
/// examples keep their input order.
pub fn sample_for_cot(examples: &[EditingExample], size: Option<usize>, seed: u64) -> Vec<&EditingExample> {
    match size {
        Some(n) if n < examples.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, examples.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| &examples[i]).collect()
        }
        _ => examples.iter().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherResponse {
    pub instance_id: String,
    pub response: String,
}

/// Checks that a teacher response has every required reasoning section.
pub fn check_teacher_response(response: &str) -> Result<(), TaskError> {
    let lower = response.to_lowercase();
    let missing: Vec<&str> = REQUIRED_COT_SECTIONS
        .iter()
        .copied()
        .filter(|s| !lower.contains(s))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(TaskError::InvalidOutput(format!(
            "teacher response lacks sections: {}",
            missing.join(", ")
        )))
    }
}

/// Fills the reasoning of matching examples. Responses that fail the section
/// check or name unknown instances are returned as rejects; their examples
/// keep empty reasoning.
pub fn ingest_teacher_responses(
    examples: &mut [EditingExample],
    responses: &[TeacherResponse],
) -> Vec<(String, String)> {
    let mut rejected = Vec::new();
    for r in responses {
        let Some(example) = examples.iter_mut().find(|e| e.example.instance_id == r.instance_id) else {
            rejected.push((r.instance_id.clone(), "unknown instance".to_string()));
            continue;
        };
        if let Err(e) = check_teacher_response(&r.response) {
            rejected.push((r.instance_id.clone(), e.to_string()));
            continue;
        }
        example.edit.reasoning = r.response.trim().to_string();
        example.example.target = example.edit.to_json();
    }
    rejected
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_instances: usize,
    pub parsed_instances: usize,
    pub unparseable: usize,
    /// Edited non-test files per instance.
    pub edited_file_histogram: BTreeMap<usize, HistogramBin>,
    /// Added plus removed lines per instance, keyed by bucket lower bound.
    pub modified_line_histogram: BTreeMap<usize, HistogramBin>,
    pub modified_line_bucket: usize,
    pub hunk_histogram: BTreeMap<usize, HistogramBin>,
    pub single_file_percent: f64,
}

fn with_percentages(counts: BTreeMap<usize, usize>, total: usize) -> BTreeMap<usize, HistogramBin> {
    counts
        .into_iter()
        .map(|(k, count)| {
            let percent = if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 };
            (k, HistogramBin { count, percent })
        })
        .collect()
}

/// Edit-size distributions over the parseable instances, counting non-test
/// files only.
pub fn compute_statistics(raws: &[RawInstance]) -> CorpusStats {
    let mut files = BTreeMap::new();
    let mut lines = BTreeMap::new();
    let mut hunks = BTreeMap::new();
    let mut parsed = 0;
    for raw in raws {
        let Ok(patch) = parse_unified_patch(&raw.gold_patch_text) else {
            continue;
        };
        if patch.is_empty() {
            continue;
        }
        parsed += 1;
        let s = PatchSummary::of(&patch);
        *files.entry(s.edited_files().len()).or_insert(0) += 1;
        let bucket = s.modified_lines() / MODIFIED_LINE_BUCKET * MODIFIED_LINE_BUCKET;
        *lines.entry(bucket).or_insert(0) += 1;
        *hunks.entry(s.hunk_count()).or_insert(0) += 1;
    }
    let single = files.get(&1).copied().unwrap_or(0);
    CorpusStats {
        total_instances: raws.len(),
        parsed_instances: parsed,
        unparseable: raws.len() - parsed,
        edited_file_histogram: with_percentages(files, parsed),
        modified_line_histogram: with_percentages(lines, parsed),
        modified_line_bucket: MODIFIED_LINE_BUCKET,
        hunk_histogram: with_percentages(hunks, parsed),
        single_file_percent: if parsed == 0 { 0.0 } else { 100.0 * single as f64 / parsed as f64 },
    }
}

/// Fate of one raw instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub instance_id: String,
    /// Set when the instance failed filtering.
    pub filter: Option<DropReason>,
    pub retrieval: Option<DropReason>,
    pub editing: Option<DropReason>,
}

impl InstanceReport {
    pub fn kept(&self) -> bool {
        self.filter.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub retrieval: Vec<TrainingExample>,
    pub editing: Vec<EditingExample>,
    pub cot_requests: Vec<CotRequest>,
    pub stats: CorpusStats,
    pub reports: Vec<InstanceReport>,
}

impl PreparedData {
    /// Drop counts per stage and reason.
    pub fn drop_table(&self) -> BTreeMap<(&'static str, DropReason), usize> {
        let mut table = BTreeMap::new();
        for r in &self.reports {
            for (stage, reason) in [("filter", r.filter), ("retrieval", r.retrieval), ("editing", r.editing)] {
                if let Some(reason) = reason {
                    *table.entry((stage, reason)).or_insert(0) += 1;
                }
            }
        }
        table
    }

    pub fn kept_count(&self) -> usize {
        self.reports.iter().filter(|r| r.kept()).count()
    }

    /// Writes `retrieval.jsonl`, `editing.jsonl`, `cot_requests.jsonl`,
    /// `stats.json` and `report.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
        fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
        let paths: Vec<PathBuf> = ["retrieval.jsonl", "editing.jsonl", "cot_requests.jsonl", "stats.json", "report.jsonl"]
            .iter()
            .map(|n| dir.join(n))
            .collect();
        let retrieval: Vec<_> = self.retrieval.iter().map(TrainingExample::record).collect();
        write_jsonl(&paths[0], &retrieval)?;
        let editing: Vec<_> = self.editing.iter().map(|e| e.example.record()).collect();
        write_jsonl(&paths[1], &editing)?;
        write_jsonl(&paths[2], &self.cot_requests)?;
        let mut stats = serde_json::to_string_pretty(&self.stats).expect("stats serialize");
        stats.push('\n');
        fs::File::create(&paths[3])
            .and_then(|mut f| f.write_all(stats.as_bytes()))
            .map_err(|e| DatasetError::io(&paths[3], e))?;
        write_jsonl(&paths[4], &self.reports)?;
        Ok(paths)
    }
}

/// Runs the whole curation pass. Instances are processed in parallel and
/// results are ordered by instance id. `load` resolves a snapshot reference.
pub fn prepare_dataset(
    raws: &[RawInstance],
    load: &(dyn Fn(&str) -> Result<RepoSnapshot, RepoError> + Sync),
    config: &DatasetConfig,
) -> Result<PreparedData, DatasetError> {
    let mut sorted: Vec<&RawInstance> = raws.iter().collect();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    type Processed = (InstanceReport, Option<TrainingExample>, Option<EditingExample>);
    let processed: Vec<Processed> = sorted
        .par_iter()
        .map(|raw| -> Result<Processed, DatasetError> {
            let mut report = InstanceReport {
                instance_id: raw.instance_id.clone(),
                filter: None,
                retrieval: None,
                editing: None,
            };
            let patch = match filter_instance(raw, config) {
                Ok(p) => p,
                Err(reason) => {
                    report.filter = Some(reason);
                    return Ok((report, None, None));
                }
            };
            let snapshot = load(&raw.base_snapshot_ref).map_err(|source| DatasetError::Snapshot {
                instance: raw.instance_id.clone(),
                reference: raw.base_snapshot_ref.clone(),
                source,
            })?;
            let index = SnapshotIndex::build(&snapshot, config.bm25, config.doc_source);
            let retrieval = build_retrieval_example(raw, &patch, &snapshot, &index, config)
                .map_err(|r| report.retrieval = Some(r))
                .ok();
            let editing = build_editing_example(raw, &patch, &snapshot, config)
                .map_err(|r| report.editing = Some(r))
                .ok();
            Ok((report, retrieval, editing))
        })
        .collect::<Result<_, _>>()?;
    let mut reports = Vec::with_capacity(processed.len());
    let mut retrieval = Vec::new();
    let mut editing = Vec::new();
    for (report, r, e) in processed {
        reports.push(report);
        retrieval.extend(r);
        editing.extend(e);
    }
    let chosen = sample_for_cot(&editing, config.cot_sample_size, config.seed);
    let cot_requests = emit_cot_requests(&chosen).map_err(|e| DatasetError::Record {
        path: String::new(),
        line: 0,
        message: e.to_string(),
    })?;
    Ok(PreparedData {
        retrieval,
        editing,
        cot_requests,
        stats: compute_statistics(raws),
        reports,
    })
}
