//! Line diffs (Myers) and unified-patch emission.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::repo::{FileLines, RepoSnapshot};

pub const DEFAULT_CONTEXT: usize = 3;
pub const NO_NEWLINE_MARKER: &str = "\\ No newline at end of file";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineKind {
    Context,
    Remove,
    Add,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HunkLine {
    pub kind: LineKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    /// Text after the closing `@@`, usually a function header.
    pub section: String,
    pub lines: Vec<HunkLine>,
    /// The last old-side line has no terminating newline.
    pub old_missing_newline: bool,
    pub new_missing_newline: bool,
}

impl Hunk {
    pub fn pre_image(&self) -> impl Iterator<Item = &str> {
        self.lines
            .iter()
            .filter(|l| l.kind != LineKind::Add)
            .map(|l| l.text.as_str())
    }

    pub fn post_image(&self) -> impl Iterator<Item = &str> {
        self.lines
            .iter()
            .filter(|l| l.kind != LineKind::Remove)
            .map(|l| l.text.as_str())
    }

    pub fn added(&self) -> usize {
        self.lines.iter().filter(|l| l.kind == LineKind::Add).count()
    }

    pub fn removed(&self) -> usize {
        self.lines.iter().filter(|l| l.kind == LineKind::Remove).count()
    }

    /// 0-based index into the old file where this hunk's pre-image begins.
    pub fn old_offset(&self) -> usize {
        if self.old_len == 0 {
            self.old_start
        } else {
            self.old_start - 1
        }
    }

    fn render(&self, out: &mut String) {
        let _ = write!(
            out,
            "@@ -{},{} +{},{} @@",
            self.old_start, self.old_len, self.new_start, self.new_len
        );
        if !self.section.is_empty() {
            out.push(' ');
            out.push_str(&self.section);
        }
        out.push('\n');
        let last_old = self.lines.iter().rposition(|l| l.kind != LineKind::Add);
        let last_new = self.lines.iter().rposition(|l| l.kind != LineKind::Remove);
        for (i, line) in self.lines.iter().enumerate() {
            out.push(match line.kind {
                LineKind::Context => ' ',
                LineKind::Remove => '-',
                LineKind::Add => '+',
            });
            out.push_str(&line.text);
            out.push('\n');
            let marker = (self.old_missing_newline && last_old == Some(i))
                || (self.new_missing_newline && last_new == Some(i));
            if marker {
                out.push_str(NO_NEWLINE_MARKER);
                out.push('\n');
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilePatch {
    /// Path before the change; `None` for a created file.
    pub old_path: Option<String>,
    /// Path after the change; `None` for a deleted file.
    pub new_path: Option<String>,
    pub hunks: Vec<Hunk>,
}

impl FilePatch {
    /// The path this patch edits (new path, or old path for deletions).
    pub fn path(&self) -> &str {
        self.new_path
            .as_deref()
            .or(self.old_path.as_deref())
            .unwrap_or_default()
    }

    pub fn is_in_place(&self) -> bool {
        self.old_path.is_some() && self.old_path == self.new_path
    }

    pub fn added(&self) -> usize {
        self.hunks.iter().map(Hunk::added).sum()
    }

    pub fn removed(&self) -> usize {
        self.hunks.iter().map(Hunk::removed).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UnifiedPatch {
    pub files: Vec<FilePatch>,
}

impl UnifiedPatch {
    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Git-style text: `diff --git`, `---`/`+++` headers, then hunks.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for file in &self.files {
            let old = file.old_path.as_deref();
            let new = file.new_path.as_deref();
            let a = old.or(new).unwrap_or_default();
            let b = new.or(old).unwrap_or_default();
            let _ = writeln!(out, "diff --git a/{a} b/{b}");
            match old {
                Some(p) => {
                    let _ = writeln!(out, "--- a/{p}");
                }
                None => out.push_str("--- /dev/null\n"),
            }
            match new {
                Some(p) => {
                    let _ = writeln!(out, "+++ b/{p}");
                }
                None => out.push_str("+++ /dev/null\n"),
            }
            for hunk in &file.hunks {
                hunk.render(&mut out);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffOp {
    Equal { old: usize, new: usize },
    Delete { old: usize },
    Insert { new: usize },
}

/// Minimal edit script between two sequences (Myers' O(ND) algorithm).
/// Within each changed run deletions precede insertions.
pub fn diff_lines<T: PartialEq>(old: &[T], new: &[T]) -> Vec<DiffOp> {
    let prefix = old.iter().zip(new).take_while(|(a, b)| a == b).count();
    let suffix = old[prefix..]
        .iter()
        .rev()
        .zip(new[prefix..].iter().rev())
        .take_while(|(a, b)| a == b)
        .count();
    let a = &old[prefix..old.len() - suffix];
    let b = &new[prefix..new.len() - suffix];

    let mut ops: Vec<DiffOp> = (0..prefix).map(|i| DiffOp::Equal { old: i, new: i }).collect();
    let mut middle = myers(a, b);
    for op in &mut middle {
        *op = match *op {
            DiffOp::Equal { old, new } => DiffOp::Equal {
                old: old + prefix,
                new: new + prefix,
            },
            DiffOp::Delete { old } => DiffOp::Delete { old: old + prefix },
            DiffOp::Insert { new } => DiffOp::Insert { new: new + prefix },
        };
    }
    ops.extend(middle);
    ops.extend((0..suffix).map(|i| DiffOp::Equal {
        old: old.len() - suffix + i,
        new: new.len() - suffix + i,
    }));
    group_changes(ops)
}

fn myers<T: PartialEq>(a: &[T], b: &[T]) -> Vec<DiffOp> {
    let n = a.len() as isize;
    let m = b.len() as isize;
    let max = (n + m) as usize;
    if max == 0 {
        return Vec::new();
    }
    let offset = max as isize + 1;
    let mut v = vec![0isize; 2 * max + 3];
    let mut trace: Vec<Vec<isize>> = Vec::new();
    'outer: for d in 0..=max as isize {
        // only diagonals -d-1..=d+1 are read back for this round
        let lo = (offset - d - 1) as usize;
        trace.push(v[lo..=lo + 2 * d as usize + 2].to_vec());
        let mut k = -d;
        while k <= d {
            let idx = (k + offset) as usize;
            let mut x = if k == -d || (k != d && v[idx - 1] < v[idx + 1]) {
                v[idx + 1]
            } else {
                v[idx - 1] + 1
            };
            let mut y = x - k;
            while x < n && y < m && a[x as usize] == b[y as usize] {
                x += 1;
                y += 1;
            }
            v[idx] = x;
            if x >= n && y >= m {
                break 'outer;
            }
            k += 2;
        }
    }

    let mut ops = Vec::with_capacity((n + m) as usize);
    let (mut x, mut y) = (n, m);
    for (d, v) in trace.iter().enumerate().rev() {
        let d = d as isize;
        let k = x - y;
        let at = |k: isize| v[(k + d + 1) as usize];
        let prev_k = if k == -d || (k != d && at(k - 1) < at(k + 1)) {
            k + 1
        } else {
            k - 1
        };
        let prev_x = at(prev_k);
        let prev_y = prev_x - prev_k;
        while x > prev_x && y > prev_y {
            x -= 1;
            y -= 1;
            ops.push(DiffOp::Equal {
                old: x as usize,
                new: y as usize,
            });
        }
        if d > 0 {
            if x == prev_x {
                ops.push(DiffOp::Insert { new: prev_y as usize });
            } else {
                ops.push(DiffOp::Delete { old: prev_x as usize });
            }
        }
        x = prev_x;
        y = prev_y;
    }
    ops.reverse();
    ops
}

fn group_changes(ops: Vec<DiffOp>) -> Vec<DiffOp> {
    let mut out = Vec::with_capacity(ops.len());
    let mut dels = Vec::new();
    let mut ins = Vec::new();
    for op in ops {
        match op {
            DiffOp::Equal { .. } => {
                out.append(&mut dels);
                out.append(&mut ins);
                out.push(op);
            }
            DiffOp::Delete { .. } => dels.push(op),
            DiffOp::Insert { .. } => ins.push(op),
        }
    }
    out.append(&mut dels);
    out.append(&mut ins);
    out
}

/// Comparison key for a line: text plus whether it is a final line lacking
/// its newline, so a newline-only change still shows up as a change.
fn keyed(fl: &FileLines) -> Vec<(&str, bool)> {
    let n = fl.lines.len();
    fl.lines
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i + 1 == n && !fl.final_newline))
        .collect()
}

/// Hunks turning `old` into `new` with `context` lines of context.
pub fn diff_hunks(old: &str, new: &str, context: usize) -> Vec<Hunk> {
    let old_fl = FileLines::from_content(old);
    let new_fl = FileLines::from_content(new);
    let old_keys = keyed(&old_fl);
    let new_keys = keyed(&new_fl);
    let ops = diff_lines(&old_keys, &new_keys);

    let changes: Vec<usize> = ops
        .iter()
        .enumerate()
        .filter(|(_, op)| !matches!(op, DiffOp::Equal { .. }))
        .map(|(i, _)| i)
        .collect();
    if changes.is_empty() {
        return Vec::new();
    }
    // group change indices whose separating equal run is at most 2*context
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for &c in &changes {
        match groups.last_mut() {
            Some((_, end)) if c - *end - 1 <= 2 * context => *end = c,
            _ => groups.push((c, c)),
        }
    }

    let old_missing = !old_fl.final_newline && !old_fl.lines.is_empty();
    let new_missing = !new_fl.final_newline && !new_fl.lines.is_empty();
    let mut hunks = Vec::with_capacity(groups.len());
    for (first, last) in groups {
        let lo = first.saturating_sub(context);
        let hi = (last + context).min(ops.len() - 1);
        let slice = &ops[lo..=hi];
        // old/new positions where this hunk begins
        let (mut old_pos, mut new_pos) = (0usize, 0usize);
        for op in &ops[..lo] {
            match op {
                DiffOp::Equal { .. } => {
                    old_pos += 1;
                    new_pos += 1;
                }
                DiffOp::Delete { .. } => old_pos += 1,
                DiffOp::Insert { .. } => new_pos += 1,
            }
        }
        let mut lines = Vec::with_capacity(slice.len());
        let (mut old_len, mut new_len) = (0, 0);
        let (mut old_end_hit, mut new_end_hit) = (false, false);
        for op in slice {
            match *op {
                DiffOp::Equal { old, new } => {
                    old_len += 1;
                    new_len += 1;
                    old_end_hit |= old + 1 == old_fl.lines.len();
                    new_end_hit |= new + 1 == new_fl.lines.len();
                    lines.push(HunkLine {
                        kind: LineKind::Context,
                        text: old_fl.lines[old].clone(),
                    });
                }
                DiffOp::Delete { old } => {
                    old_len += 1;
                    old_end_hit |= old + 1 == old_fl.lines.len();
                    lines.push(HunkLine {
                        kind: LineKind::Remove,
                        text: old_fl.lines[old].clone(),
                    });
                }
                DiffOp::Insert { new } => {
                    new_len += 1;
                    new_end_hit |= new + 1 == new_fl.lines.len();
                    lines.push(HunkLine {
                        kind: LineKind::Add,
                        text: new_fl.lines[new].clone(),
                    });
                }
            }
        }
        hunks.push(Hunk {
            old_start: if old_len == 0 { old_pos } else { old_pos + 1 },
            old_len,
            new_start: if new_len == 0 { new_pos } else { new_pos + 1 },
            new_len,
            section: String::new(),
            lines,
            old_missing_newline: old_missing && old_end_hit,
            new_missing_newline: new_missing && new_end_hit,
        });
    }
    hunks
}

/// Patch turning `original` into `modified`, for files present in both.
/// Files only on one side are ignored.
pub fn to_unified_patch(original: &RepoSnapshot, modified: &RepoSnapshot) -> UnifiedPatch {
    let mut files = Vec::new();
    for old in original.files() {
        let Some(new) = modified.get(&old.path) else {
            continue;
        };
        if old.content == new.content {
            continue;
        }
        let hunks = diff_hunks(&old.content, &new.content, DEFAULT_CONTEXT);
        if !hunks.is_empty() {
            files.push(FilePatch {
                old_path: Some(old.path.clone()),
                new_path: Some(old.path.clone()),
                hunks,
            });
        }
    }
    UnifiedPatch { files }
}
