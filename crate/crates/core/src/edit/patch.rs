//! Parsing and strict application of git-style unified diffs, and conversion
//! of a gold patch into the structured-edit training target.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::diff::{FilePatch, Hunk, HunkLine, LineKind, UnifiedPatch};
use super::EditError;
use crate::repo::{classify_test_file, FileLines, RepoSnapshot};
use crate::task::{EditBlock, StructuredEdit};

fn strip_prefix_path(raw: &str) -> Option<String> {
    // "--- a/path\t2024-01-01 ..." may carry a timestamp after a tab
    let raw = raw.split('\t').next().unwrap_or(raw).trim_end();
    if raw == "/dev/null" {
        return None;
    }
    let raw = raw
        .strip_prefix("a/")
        .or_else(|| raw.strip_prefix("b/"))
        .unwrap_or(raw);
    Some(raw.to_string())
}

fn parse_range(s: &str, line: usize) -> Result<(usize, usize), EditError> {
    let bad = || EditError::Parse {
        line,
        message: format!("malformed hunk range {s:?}"),
    };
    let (start, len) = match s.split_once(',') {
        Some((a, b)) => (a, Some(b)),
        None => (s, None),
    };
    let start: usize = start.parse().map_err(|_| bad())?;
    let len: usize = match len {
        Some(l) => l.parse().map_err(|_| bad())?,
        None => 1,
    };
    Ok((start, len))
}

fn parse_hunk_header(text: &str, line: usize) -> Result<Hunk, EditError> {
    let bad = |m: &str| EditError::Parse {
        line,
        message: format!("{m}: {text:?}"),
    };
    let rest = text.strip_prefix("@@ ").ok_or_else(|| bad("malformed hunk header"))?;
    let (ranges, section) = rest
        .split_once(" @@")
        .ok_or_else(|| bad("malformed hunk header"))?;
    let mut parts = ranges.split(' ');
    let old = parts
        .next()
        .and_then(|p| p.strip_prefix('-'))
        .ok_or_else(|| bad("missing old range"))?;
    let new = parts
        .next()
        .and_then(|p| p.strip_prefix('+'))
        .ok_or_else(|| bad("missing new range"))?;
    if parts.next().is_some() {
        return Err(bad("malformed hunk header"));
    }
    let (old_start, old_len) = parse_range(old, line)?;
    let (new_start, new_len) = parse_range(new, line)?;
    Ok(Hunk {
        old_start,
        old_len,
        new_start,
        new_len,
        section: section.trim_start().to_string(),
        lines: Vec::new(),
        old_missing_newline: false,
        new_missing_newline: false,
    })
}

/// Parses git-style or plain unified diffs. Text outside file sections (a
/// commit message, say) is skipped; hunk bodies must match their headers.
pub fn parse_unified_patch(text: &str) -> Result<UnifiedPatch, EditError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut files: Vec<FilePatch> = Vec::new();
    let mut current: Option<FilePatch> = None;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        let lineno = i + 1;
        if line.starts_with("diff --git ") {
            files.extend(current.take());
            i += 1;
            continue;
        }
        if let Some(old) = line.strip_prefix("--- ") {
            if let Some(new) = lines.get(i + 1).and_then(|l| l.strip_prefix("+++ ")) {
                files.extend(current.take());
                current = Some(FilePatch {
                    old_path: strip_prefix_path(old),
                    new_path: strip_prefix_path(new),
                    hunks: Vec::new(),
                });
                i += 2;
                continue;
            }
        }
        if line.starts_with("@@") {
            let Some(file) = current.as_mut() else {
                return Err(EditError::Parse {
                    line: lineno,
                    message: "hunk before any file header".into(),
                });
            };
            let mut hunk = parse_hunk_header(line, lineno)?;
            let (mut old_seen, mut new_seen) = (0, 0);
            i += 1;
            while old_seen < hunk.old_len || new_seen < hunk.new_len {
                let Some(&body) = lines.get(i) else {
                    return Err(EditError::Parse {
                        line: lineno,
                        message: format!(
                            "hunk ends early: header claims -{} +{}, found -{old_seen} +{new_seen}",
                            hunk.old_len, hunk.new_len
                        ),
                    });
                };
                let (kind, text) = match body.chars().next() {
                    Some(' ') => (LineKind::Context, &body[1..]),
                    // some tools strip the space from empty context lines
                    None => (LineKind::Context, ""),
                    Some('-') => (LineKind::Remove, &body[1..]),
                    Some('+') => (LineKind::Add, &body[1..]),
                    Some('\\') => {
                        mark_missing_newline(&mut hunk);
                        i += 1;
                        continue;
                    }
                    _ => {
                        return Err(EditError::Parse {
                            line: i + 1,
                            message: format!(
                                "hunk ends early: header claims -{} +{}, found -{old_seen} +{new_seen}",
                                hunk.old_len, hunk.new_len
                            ),
                        })
                    }
                };
                match kind {
                    LineKind::Context => {
                        old_seen += 1;
                        new_seen += 1;
                    }
                    LineKind::Remove => old_seen += 1,
                    LineKind::Add => new_seen += 1,
                }
                if old_seen > hunk.old_len || new_seen > hunk.new_len {
                    return Err(EditError::Parse {
                        line: i + 1,
                        message: "hunk body longer than its header".into(),
                    });
                }
                hunk.lines.push(HunkLine {
                    kind,
                    text: text.to_string(),
                });
                i += 1;
            }
            if lines.get(i).is_some_and(|l| l.starts_with('\\')) {
                mark_missing_newline(&mut hunk);
                i += 1;
            }
            if let Some(prev) = file.hunks.last() {
                if hunk.old_offset() < prev.old_offset() + prev.old_len {
                    return Err(EditError::Parse {
                        line: lineno,
                        message: "hunks overlap or are out of order".into(),
                    });
                }
            }
            file.hunks.push(hunk);
            continue;
        }
        if current.as_ref().is_some_and(|f| !f.hunks.is_empty())
            && matches!(line.chars().next(), Some('+' | '-' | ' '))
        {
            return Err(EditError::Parse {
                line: lineno,
                message: "hunk body longer than its header".into(),
            });
        }
        i += 1;
    }
    files.extend(current);
    Ok(UnifiedPatch { files })
}

fn mark_missing_newline(hunk: &mut Hunk) {
    match hunk.lines.last().map(|l| l.kind) {
        Some(LineKind::Context) => {
            hunk.old_missing_newline = true;
            hunk.new_missing_newline = true;
        }
        Some(LineKind::Remove) => hunk.old_missing_newline = true,
        Some(LineKind::Add) => hunk.new_missing_newline = true,
        None => {}
    }
}

/// Per-file facts used by filtering and corpus statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChangeSummary {
    pub path: String,
    pub is_test: bool,
    pub hunks: usize,
    pub added: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PatchSummary {
    pub files: Vec<FileChangeSummary>,
}

impl PatchSummary {
    pub fn of(patch: &UnifiedPatch) -> Self {
        PatchSummary {
            files: patch
                .files
                .iter()
                .map(|f| FileChangeSummary {
                    path: f.path().to_string(),
                    is_test: classify_test_file(f.path()),
                    hunks: f.hunks.len(),
                    added: f.added(),
                    removed: f.removed(),
                })
                .collect(),
        }
    }

    fn non_test(&self) -> impl Iterator<Item = &FileChangeSummary> {
        self.files.iter().filter(|f| !f.is_test)
    }

    /// Edited non-test paths.
    pub fn edited_files(&self) -> Vec<&str> {
        self.non_test().map(|f| f.path.as_str()).collect()
    }

    pub fn modified_lines(&self) -> usize {
        self.non_test().map(|f| f.added + f.removed).sum()
    }

    pub fn hunk_count(&self) -> usize {
        self.non_test().map(|f| f.hunks).sum()
    }
}

/// Applies the hunks to one file's content; hunk positions must match exactly.
pub fn apply_hunks(path: &str, content: &str, hunks: &[Hunk]) -> Result<String, EditError> {
    let old = FileLines::from_content(content);
    let mut out: Vec<String> = Vec::with_capacity(old.lines.len());
    let mut final_newline = old.final_newline;
    let mut cursor = 0;
    for hunk in hunks {
        let at = hunk.old_offset();
        if at < cursor || at + hunk.old_len > old.lines.len() {
            return Err(EditError::Apply {
                file: path.to_string(),
                message: format!("hunk at -{},{} is out of range", hunk.old_start, hunk.old_len),
            });
        }
        let pre: Vec<&str> = hunk.pre_image().collect();
        if pre.len() != hunk.old_len || old.lines[at..at + hunk.old_len] != pre[..] {
            return Err(EditError::Apply {
                file: path.to_string(),
                message: format!("hunk at -{},{} does not match", hunk.old_start, hunk.old_len),
            });
        }
        let reaches_end = at + hunk.old_len == old.lines.len();
        if reaches_end && hunk.old_len > 0 && hunk.old_missing_newline == old.final_newline {
            return Err(EditError::Apply {
                file: path.to_string(),
                message: "end-of-file newline does not match".into(),
            });
        }
        out.extend(old.lines[cursor..at].iter().cloned());
        out.extend(hunk.post_image().map(str::to_string));
        cursor = at + hunk.old_len;
        if reaches_end {
            final_newline = !hunk.new_missing_newline;
        }
    }
    out.extend(old.lines[cursor..].iter().cloned());
    Ok(FileLines {
        lines: out,
        final_newline,
    }
    .to_content())
}

/// Applies an in-place patch to a snapshot. File creation, deletion and
/// renames are rejected.
pub fn apply_patch(snapshot: &RepoSnapshot, patch: &UnifiedPatch) -> Result<RepoSnapshot, EditError> {
    let mut updates: BTreeMap<String, String> = BTreeMap::new();
    for file in &patch.files {
        if !file.is_in_place() {
            return Err(EditError::Apply {
                file: file.path().to_string(),
                message: "file creation, deletion and renames are not supported".into(),
            });
        }
        let path = file.path();
        let base = match updates.get(path) {
            Some(content) => content.clone(),
            None => snapshot
                .get(path)
                .ok_or_else(|| EditError::Apply {
                    file: path.to_string(),
                    message: "file not in snapshot".into(),
                })?
                .content
                .clone(),
        };
        let patched = apply_hunks(path, &base, &file.hunks)?;
        updates.insert(path.to_string(), patched);
    }
    snapshot
        .with_contents(updates)
        .map_err(|e| EditError::Apply {
            file: String::new(),
            message: e.to_string(),
        })
}

/// Turns every hunk of a cleanly applying patch into an edit block anchored
/// on its pre-image. A hunk with an empty pre-image borrows the neighbouring
/// line as its anchor.
pub fn gold_patch_to_structured_edit(
    snapshot: &RepoSnapshot,
    patch: &UnifiedPatch,
) -> Result<StructuredEdit, EditError> {
    apply_patch(snapshot, patch)?;
    let mut edits = Vec::new();
    for file in &patch.files {
        let path = file.path();
        let lines = snapshot.get(path).map(|f| f.lines()).unwrap_or_default();
        for hunk in &file.hunks {
            if hunk.old_missing_newline != hunk.new_missing_newline {
                return Err(EditError::Apply {
                    file: path.to_string(),
                    message: "end-of-file newline changes cannot be expressed as an edit block"
                        .into(),
                });
            }
            let mut pre: Vec<String> = hunk.pre_image().map(str::to_string).collect();
            let mut post: Vec<String> = hunk.post_image().map(str::to_string).collect();
            let mut start = hunk.old_start;
            if pre.is_empty() {
                if hunk.old_start >= 1 {
                    // insertion after line `old_start`
                    let anchor = lines.lines[hunk.old_start - 1].clone();
                    pre.push(anchor.clone());
                    post.insert(0, anchor);
                } else if let Some(first) = lines.lines.first() {
                    pre.push(first.clone());
                    post.push(first.clone());
                    start = 1;
                } else {
                    return Err(EditError::Apply {
                        file: path.to_string(),
                        message: "insertion into an empty file has no anchor line".into(),
                    });
                }
            }
            edits.push(EditBlock::from_lines(path, start, &pre, &post));
        }
    }
    Ok(StructuredEdit {
        reasoning: String::new(),
        edits,
    })
}
