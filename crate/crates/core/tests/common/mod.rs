#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use issuefix_core::repo::RepoSnapshot;
use issuefix_core::task::{EditBlock, StructuredEdit};

/// Textbook BM25 over pre-tokenized documents, recomputing every statistic
/// from scratch per call.
pub fn brute_bm25(docs: &[Vec<String>], query: &[String], k1: f64, b: f64) -> Vec<f64> {
    let n = docs.len() as f64;
    let avgdl = if docs.is_empty() {
        0.0
    } else {
        docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n
    };
    let mut seen = HashSet::new();
    let terms: Vec<&String> = query.iter().filter(|t| seen.insert(t.as_str())).collect();
    docs.iter()
        .map(|d| {
            let mut s = 0.0;
            for t in &terms {
                let tf = d.iter().filter(|w| w == t).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let df = docs.iter().filter(|o| o.contains(t)).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                let norm = if avgdl > 0.0 { 1.0 - b + b * d.len() as f64 / avgdl } else { 1.0 };
                s += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
            s
        })
        .collect()
}

/// Ranking by brute-force scores: descending, ties by path.
pub fn brute_ranking(paths: &[String], scores: &[f64]) -> Vec<String> {
    let mut idx: Vec<usize> = (0..paths.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| paths[a].cmp(&paths[b]))
    });
    idx.into_iter().map(|i| paths[i].clone()).collect()
}

const WORDS: &[&str] = &[
    "alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa", "lam", "mu",
    "nu", "xi", "omicron", "pi", "rho", "sigma", "tau", "ups",
];

/// A random corpus of lowercase word documents (no tokenizer subtleties).
pub fn random_corpus(rng: &mut ChaCha8Rng, max_docs: usize, max_tokens: usize) -> Vec<(String, Vec<String>)> {
    let n = rng.random_range(1..=max_docs);
    let vocab = rng.random_range(3..=WORDS.len());
    (0..n)
        .map(|i| {
            let len = rng.random_range(0..=max_tokens);
            let toks = (0..len).map(|_| WORDS[rng.random_range(0..vocab)].to_string()).collect();
            (format!("pkg/m{:03}_{}.py", rng.random_range(0..1000), i), toks)
        })
        .collect()
}

pub fn random_query(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.random_range(1..=6);
    (0..n).map(|_| WORDS.choose(rng).unwrap().to_string()).collect()
}

/// A generated Python module together with the body lines that must never
/// appear in its skeleton.
pub struct GeneratedModule {
    pub source: String,
    pub interior: Vec<String>,
    /// Head and tail lines of top-level function bodies.
    pub kept: Vec<String>,
}

/// Random module of functions and classes whose body lines are unique
/// assignments, so each line can be recognized in the rendering.
pub fn random_module(rng: &mut ChaCha8Rng, tag: usize) -> GeneratedModule {
    let mut src = String::new();
    let mut interior = Vec::new();
    let mut kept = Vec::new();
    let mut counter = 0usize;
    if rng.random_bool(0.5) {
        src.push_str(&format!("\"\"\"Module {tag}.\"\"\"\n\nimport os\n"));
    }
    for item in 0..rng.random_range(1..=5) {
        src.push('\n');
        let is_class = rng.random_bool(0.3);
        let (indent, methods) = if is_class {
            src.push_str(&format!("class C{tag}_{item}:\n"));
            if rng.random_bool(0.5) {
                src.push_str("    \"\"\"A class.\"\"\"\n\n");
            }
            ("    ", rng.random_range(1..=3))
        } else {
            ("", 1)
        };
        for m in 0..methods {
            if rng.random_bool(0.3) {
                src.push_str(&format!("{indent}@decorator_{m}\n"));
            }
            let args = if is_class { "self, a" } else { "a, b=1" };
            src.push_str(&format!("{indent}def f{tag}_{item}_{m}({args}):\n"));
            let len = rng.random_range(1..=24);
            let mut body = Vec::with_capacity(len);
            while body.len() < len {
                counter += 1;
                let name = format!("v{tag}x{counter}");
                if rng.random_bool(0.15) && body.len() + 2 <= len {
                    body.push(format!("{indent}    if {name}_c:"));
                    body.push(format!("{indent}        {name} = {counter}"));
                } else {
                    body.push(format!("{indent}    {name} = {counter}"));
                }
            }
            if len > 10 {
                interior.extend(body[5..len - 5].iter().cloned());
            }
            if !is_class {
                if len > 10 {
                    kept.extend(body[..5].iter().cloned());
                    kept.extend(body[len - 5..].iter().cloned());
                } else {
                    kept.extend(body.iter().cloned());
                }
            }
            for line in &body {
                src.push_str(line);
                src.push('\n');
            }
            if is_class && m + 1 < methods {
                src.push('\n');
            }
        }
    }
    GeneratedModule { source: src, interior, kept }
}

const CODE_LINES: &[&str] = &[
    "x = 1",
    "y = x + 2",
    "",
    "return y",
    "def helper():",
    "    pass",
    "    return None",
    "if x:",
    "print(x)",
    "# comment",
    "z = [1, 2, 3]",
    "class K:",
];

pub fn random_lines(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<String> {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|i| {
            if rng.random_bool(0.6) {
                CODE_LINES.choose(rng).unwrap().to_string()
            } else {
                format!("line_{}_{}", i, rng.random_range(0..5))
            }
        })
        .collect()
}

/// File text for `lines`. A trailing empty line needs the final newline to
/// survive, so it forces one.
pub fn join_content(lines: &[String], trailing_newline: bool) -> String {
    let mut s = lines.join("\n");
    if trailing_newline || lines.last().is_some_and(|l| l.is_empty()) {
        s.push('\n');
    }
    s
}

/// A random snapshot of 1..=3 plain-text files (so no syntax check applies).
pub fn random_snapshot(rng: &mut ChaCha8Rng) -> (RepoSnapshot, BTreeMap<String, Vec<String>>) {
    let mut files = BTreeMap::new();
    let mut raw = Vec::new();
    for i in 0..rng.random_range(1..=3) {
        let path = format!("src/f{i}.txt");
        let lines = random_lines(rng, 1, 30);
        let content = join_content(&lines, rng.random_bool(0.8));
        raw.push((path.clone(), content));
        files.insert(path, lines);
    }
    (RepoSnapshot::from_files(raw).unwrap(), files)
}

/// Random structured edit over disjoint line spans of the snapshot files.
pub fn random_edit(rng: &mut ChaCha8Rng, files: &BTreeMap<String, Vec<String>>) -> StructuredEdit {
    let mut edits = Vec::new();
    for (path, lines) in files {
        if rng.random_bool(0.3) && !edits.is_empty() {
            continue;
        }
        let mut cursor = 0usize;
        for _ in 0..rng.random_range(1..=3) {
            if cursor >= lines.len() {
                break;
            }
            let start = rng.random_range(cursor..lines.len());
            let end = rng.random_range(start..lines.len().min(start + 4));
            let original = &lines[start..=end];
            let modified = random_lines(rng, 0, 4);
            edits.push(EditBlock::from_lines(path, start + 1, original, &modified));
            cursor = end + 2;
        }
    }
    StructuredEdit {
        reasoning: "generated".into(),
        edits,
    }
}

/// Random modification of a file: replacements, insertions and deletions,
/// keeping at least one line and changing at least one.
pub fn mutate_lines(rng: &mut ChaCha8Rng, lines: &[String]) -> Vec<String> {
    loop {
        let mut out = Vec::new();
        for l in lines {
            match rng.random_range(0..10) {
                0 => {}
                1 => out.push(format!("changed_{}", rng.random_range(0..100))),
                2 => {
                    out.push(l.clone());
                    out.push(format!("inserted_{}", rng.random_range(0..100)));
                }
                _ => out.push(l.clone()),
            }
        }
        if rng.random_bool(0.1) {
            out.insert(0, "head_insert".into());
        }
        if !out.is_empty() && out != lines {
            return out;
        }
    }
}

/// Git-style patch text for one file produced by the independent diff
/// library.
pub fn oracle_file_patch(path: &str, old: &str, new: &str) -> String {
    let text = diffy::create_patch(old, new).to_string();
    let body = text
        .split_once('\n')
        .and_then(|(_, rest)| rest.split_once('\n'))
        .map(|(_, rest)| rest)
        .unwrap_or("");
    format!("diff --git a/{path} b/{path}\n--- a/{path}\n+++ b/{path}\n{body}")
}

/// Splits a multi-file git patch into `(path, section)` pairs, each section
/// starting at its `--- ` line.
pub fn split_file_sections(patch: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for chunk in patch.split("diff --git ").filter(|c| !c.is_empty()) {
        let start = if chunk.starts_with("--- ") {
            0
        } else {
            chunk.find("\n--- ").map(|i| i + 1).expect("file header")
        };
        let section = &chunk[start..];
        let path = section
            .lines()
            .nth(1)
            .and_then(|l| l.strip_prefix("+++ b/"))
            .expect("new path")
            .to_string();
        out.push((path, section.to_string()));
    }
    out
}

/// Applies a git patch with the independent library, file by file.
pub fn oracle_apply(files: &BTreeMap<String, String>, patch: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = files.clone();
    for (path, section) in split_file_sections(patch) {
        let parsed = diffy::Patch::from_str(&section).map_err(|e| format!("{path}: {e}"))?;
        let old = out.get(&path).ok_or_else(|| format!("{path} missing"))?;
        let new = diffy::apply(old, &parsed).map_err(|e| format!("{path}: {e}"))?;
        out.insert(path, new);
    }
    Ok(out)
}

pub fn contents(snapshot: &RepoSnapshot) -> BTreeMap<String, String> {
    snapshot.files().map(|f| (f.path.clone(), f.content.clone())).collect()
}
