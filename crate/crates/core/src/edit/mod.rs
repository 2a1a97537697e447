//! Applying structured edits to a snapshot, syntax checks, and conversion
//! between structured edits and unified patches.

pub mod diff;
pub mod patch;
pub mod syntax;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repo::{FileLines, FileRecord, RepoSnapshot};
use crate::task::{EditBlock, StructuredEdit};

pub use diff::{diff_hunks, to_unified_patch, FilePatch, Hunk, HunkLine, LineKind, UnifiedPatch};
pub use patch::{
    apply_hunks, apply_patch, gold_patch_to_structured_edit, parse_unified_patch,
    FileChangeSummary, PatchSummary,
};
pub use syntax::{check_file_syntax, check_syntax, SyntaxCheck, SyntaxErrorDetails};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EditError {
    #[error("cannot locate snippet in {file}: {reason}")]
    Locate { file: String, reason: String },
    #[error("overlapping edits in {file}: lines {first:?} and {second:?}")]
    Conflict {
        file: String,
        first: (usize, usize),
        second: (usize, usize),
    },
    #[error("patch parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("patch does not apply to {file}: {message}")]
    Apply { file: String, message: String },
    #[error("unsupported language {0:?}")]
    UnsupportedLanguage(String),
}

/// A located snippet: 1-based inclusive line range and its exact lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetSpan {
    pub file: String,
    pub start_line: usize,
    pub end_line: usize,
    pub text: Vec<String>,
}

impl SnippetSpan {
    fn range(&self) -> (usize, usize) {
        (self.start_line, self.end_line)
    }
}

/// Finds the lines an edit block refers to. The line numbers are trusted
/// when the text at those numbers matches; otherwise the stripped snippet
/// must occur exactly once in the file.
pub fn locate_snippet(file: &FileRecord, block: &EditBlock) -> Result<SnippetSpan, EditError> {
    locate_in_lines(&file.path, &file.lines().lines, block)
}

fn locate_in_lines(path: &str, lines: &[String], block: &EditBlock) -> Result<SnippetSpan, EditError> {
    let fail = |reason: String| EditError::Locate {
        file: path.to_string(),
        reason,
    };
    let numbered = block.numbered_lines().map_err(|e| fail(e.to_string()))?;
    let text: Vec<String> = numbered.iter().map(|(_, t)| t.clone()).collect();
    let start = numbered[0].0;
    let end = start + text.len() - 1;
    if end <= lines.len() && lines[start - 1..end] == text[..] {
        return Ok(SnippetSpan {
            file: path.to_string(),
            start_line: start,
            end_line: end,
            text,
        });
    }
    let mut matches = lines
        .windows(text.len())
        .enumerate()
        .filter(|(_, w)| *w == &text[..])
        .map(|(i, _)| i);
    match (matches.next(), matches.next()) {
        (Some(i), None) => Ok(SnippetSpan {
            file: path.to_string(),
            start_line: i + 1,
            end_line: i + text.len(),
            text,
        }),
        (None, _) => Err(fail(format!(
            "lines {start}-{end} do not match and the snippet text is not in the file"
        ))),
        (Some(_), Some(_)) => Err(fail(format!(
            "lines {start}-{end} do not match and the snippet text occurs more than once"
        ))),
    }
}

/// Result of applying a structured edit.
#[derive(Debug, Clone)]
pub struct AppliedEdit {
    pub snapshot: RepoSnapshot,
    pub spans: Vec<SnippetSpan>,
    /// Files whose content was touched, in path order.
    pub changed_files: Vec<String>,
}

/// Replaces each located span with its block's modified lines. Blocks in
/// one file are applied bottom-up; overlapping spans are rejected.
pub fn apply_edits(snapshot: &RepoSnapshot, edit: &StructuredEdit) -> Result<AppliedEdit, EditError> {
    let mut per_file: BTreeMap<&str, Vec<&EditBlock>> = BTreeMap::new();
    for block in &edit.edits {
        per_file.entry(block.file.as_str()).or_default().push(block);
    }
    let mut updates = Vec::new();
    let mut all_spans = Vec::new();
    for (path, blocks) in per_file {
        let record = snapshot.get(path).ok_or_else(|| EditError::Locate {
            file: path.to_string(),
            reason: "file not in repository".into(),
        })?;
        let mut lines = record.lines();
        let mut located: Vec<(SnippetSpan, &EditBlock)> = Vec::with_capacity(blocks.len());
        for block in blocks {
            located.push((locate_in_lines(path, &lines.lines, block)?, block));
        }
        located.sort_by_key(|(s, _)| s.start_line);
        for pair in located.windows(2) {
            if pair[1].0.start_line <= pair[0].0.end_line {
                return Err(EditError::Conflict {
                    file: path.to_string(),
                    first: pair[0].0.range(),
                    second: pair[1].0.range(),
                });
            }
        }
        for (span, block) in located.iter().rev() {
            lines
                .lines
                .splice(span.start_line - 1..span.end_line, block.modified_lines());
        }
        if lines.lines.is_empty() {
            lines = FileLines::default();
        }
        updates.push((path.to_string(), lines.to_content()));
        all_spans.extend(located.into_iter().map(|(s, _)| s));
    }
    let changed_files = updates.iter().map(|(p, _)| p.clone()).collect();
    let snapshot = snapshot
        .with_contents(updates)
        .map_err(|e| EditError::Locate {
            file: String::new(),
            reason: e.to_string(),
        })?;
    Ok(AppliedEdit {
        snapshot,
        spans: all_spans,
        changed_files,
    })
}
