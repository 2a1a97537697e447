//! Repository snapshots: loading, path normalization, file classification and
//! the numbered-line view handed to the editing model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Exclusion globs applied when no explicit list is configured.
pub const DEFAULT_EXCLUSIONS: &[&str] = &[".git/**", "**/*.pyc", "**/node_modules/**"];

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("structural error: {0}")]
    Structural(String),
    #[error("invalid exclusion glob {glob:?}: {reason}")]
    Glob { glob: String, reason: String },
}

impl RepoError {
    fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        RepoError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Source languages recognized by extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Python,
}

impl Language {
    pub fn from_path(path: &str) -> Option<Language> {
        let base = path.rsplit('/').next().unwrap_or(path);
        let ext = base.rsplit_once('.').map(|(_, e)| e)?;
        match ext {
            "py" | "pyi" => Some(Language::Python),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Language::Python => "python",
        }
    }
}

impl std::str::FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "python" | "py" => Ok(Language::Python),
            other => Err(format!("unsupported language {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub content: String,
    pub is_source: bool,
    pub is_test: bool,
}

impl FileRecord {
    /// Builds a record from raw bytes. CRLF (and lone CR) become LF; content
    /// holding a NUL byte is treated as binary and never marked as source.
    pub fn from_bytes(path: &str, bytes: &[u8]) -> Self {
        let binary = bytes.contains(&0);
        let content = normalize_newlines(&String::from_utf8_lossy(bytes));
        let is_source = !binary && Language::from_path(path).is_some();
        FileRecord {
            path: path.to_string(),
            content,
            is_source,
            is_test: is_source && classify_test_file(path),
        }
    }

    pub fn from_text(path: &str, content: &str) -> Self {
        Self::from_bytes(path, content.as_bytes())
    }

    pub fn language(&self) -> Option<Language> {
        if self.is_source {
            Language::from_path(&self.path)
        } else {
            None
        }
    }

    pub fn lines(&self) -> FileLines {
        FileLines::from_content(&self.content)
    }

    pub fn line_count(&self) -> usize {
        self.lines().lines.len()
    }
}

/// A file body as separate lines plus a flag for the terminating newline.
///
/// `from_content(c).to_content() == c` for every string `c`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FileLines {
    pub lines: Vec<String>,
    pub final_newline: bool,
}

impl FileLines {
    pub fn from_content(content: &str) -> Self {
        if content.is_empty() {
            return FileLines::default();
        }
        let (body, final_newline) = match content.strip_suffix('\n') {
            Some(body) => (body, true),
            None => (content, false),
        };
        FileLines {
            lines: body.split('\n').map(str::to_string).collect(),
            final_newline,
        }
    }

    pub fn to_content(&self) -> String {
        let mut out = self.lines.join("\n");
        if self.final_newline && !self.lines.is_empty() {
            out.push('\n');
        }
        out
    }
}

pub fn normalize_newlines(text: &str) -> String {
    if !text.contains('\r') {
        return text.to_string();
    }
    text.replace("\r\n", "\n").replace('\r', "\n")
}

/// Normalizes a relative path to `/`-separated form without `.`/`..` segments.
pub fn normalize_path(raw: &str) -> Result<String, RepoError> {
    let mut parts: Vec<&str> = Vec::new();
    for seg in raw.split(['/', '\\']) {
        match seg {
            "" | "." => {}
            ".." => {
                if parts.pop().is_none() {
                    return Err(RepoError::Structural(format!(
                        "path {raw:?} escapes the repository root"
                    )));
                }
            }
            s => parts.push(s),
        }
    }
    if parts.is_empty() {
        return Err(RepoError::Structural(format!("empty path {raw:?}")));
    }
    Ok(parts.join("/"))
}

/// True when a path looks like a test file: some segment is `test`/`tests`,
/// or the basename stem starts with `test_` or ends with `_test`.
pub fn classify_test_file(path: &str) -> bool {
    let segments: Vec<&str> = path.split('/').collect();
    if segments.iter().any(|s| *s == "test" || *s == "tests") {
        return true;
    }
    let base = segments.last().copied().unwrap_or("");
    let stem = match base.rsplit_once('.') {
        Some((stem, _)) if !stem.is_empty() => stem,
        _ => base,
    };
    stem.starts_with("test_") || stem.ends_with("_test")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoSnapshot {
    root_id: String,
    files: BTreeMap<String, FileRecord>,
    readme: Option<String>,
}

impl RepoSnapshot {
    /// Builds a snapshot from in-memory `(path, bytes)` pairs. Paths are
    /// normalized; two inputs normalizing to the same path are rejected.
    pub fn from_files<P, B>(files: impl IntoIterator<Item = (P, B)>) -> Result<Self, RepoError>
    where
        P: AsRef<str>,
        B: AsRef<[u8]>,
    {
        let mut map = BTreeMap::new();
        for (path, bytes) in files {
            let norm = normalize_path(path.as_ref())?;
            let record = FileRecord::from_bytes(&norm, bytes.as_ref());
            if map.insert(norm.clone(), record).is_some() {
                return Err(RepoError::Structural(format!("duplicate path {norm:?}")));
            }
        }
        Ok(Self::from_records(map))
    }

    fn from_records(files: BTreeMap<String, FileRecord>) -> Self {
        let readme = files
            .keys()
            .find(|p| !p.contains('/') && is_readme_name(p))
            .cloned();
        let mut hasher = Sha256::new();
        for (path, rec) in &files {
            hasher.update(path.as_bytes());
            hasher.update([0u8]);
            hasher.update(rec.content.as_bytes());
            hasher.update([0u8]);
        }
        RepoSnapshot {
            root_id: hex::encode(hasher.finalize()),
            files,
            readme,
        }
    }

    pub fn root_id(&self) -> &str {
        &self.root_id
    }

    pub fn readme_path(&self) -> Option<&str> {
        self.readme.as_deref()
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&FileRecord> {
        self.files.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.files.contains_key(path)
    }

    /// Files in lexicographic path order.
    pub fn files(&self) -> impl Iterator<Item = &FileRecord> {
        self.files.values()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    /// Non-test source files, the default retrieval corpus.
    pub fn retrievable_files(&self) -> impl Iterator<Item = &FileRecord> {
        self.files().filter(|f| f.is_source && !f.is_test)
    }

    /// Returns a copy with the given files' contents replaced. Paths must
    /// already exist in the snapshot.
    pub fn with_contents(
        &self,
        updates: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, RepoError> {
        let mut files = self.files.clone();
        for (path, content) in updates {
            let Some(rec) = files.get_mut(&path) else {
                return Err(RepoError::Structural(format!("no such file {path:?}")));
            };
            rec.content = content;
        }
        Ok(Self::from_records(files))
    }

    /// Writes every file under `dir`, creating parent directories.
    pub fn materialize(&self, dir: &Path) -> Result<(), RepoError> {
        for rec in self.files() {
            let target = dir.join(&rec.path);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(|e| RepoError::io(parent, e))?;
            }
            fs::write(&target, rec.content.as_bytes()).map_err(|e| RepoError::io(&target, e))?;
        }
        Ok(())
    }
}

fn is_readme_name(base: &str) -> bool {
    let lower = base.to_ascii_lowercase();
    lower == "readme" || lower.starts_with("readme.")
}

pub fn find_readme(snapshot: &RepoSnapshot) -> Option<&str> {
    snapshot
        .readme
        .as_deref()
        .and_then(|p| snapshot.get(p))
        .map(|f| f.content.as_str())
}

fn build_globset(exclusions: &[String]) -> Result<GlobSet, RepoError> {
    let mut builder = GlobSetBuilder::new();
    for g in exclusions {
        let glob = Glob::new(g).map_err(|e| RepoError::Glob {
            glob: g.clone(),
            reason: e.to_string(),
        })?;
        builder.add(glob);
    }
    builder.build().map_err(|e| RepoError::Glob {
        glob: exclusions.join(","),
        reason: e.to_string(),
    })
}

pub fn default_exclusions() -> Vec<String> {
    DEFAULT_EXCLUSIONS.iter().map(|s| s.to_string()).collect()
}

/// Loads a checked-out directory or a `.tar`, `.tar.gz`/`.tgz` or `.zip`
/// archive. Archives whose entries all sit under one top-level directory have
/// that directory stripped.
pub fn load_snapshot(root: &Path, exclusions: &[String]) -> Result<RepoSnapshot, RepoError> {
    let globs = build_globset(exclusions)?;
    let meta = fs::metadata(root).map_err(|e| RepoError::io(root, e))?;
    let entries = if meta.is_dir() {
        read_dir_entries(root)?
    } else {
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        let raw = if name.ends_with(".zip") {
            read_zip_entries(root)?
        } else if name.ends_with(".tar.gz") || name.ends_with(".tgz") {
            let file = fs::File::open(root).map_err(|e| RepoError::io(root, e))?;
            read_tar_entries(root, flate2::read::GzDecoder::new(file))?
        } else if name.ends_with(".tar") {
            let file = fs::File::open(root).map_err(|e| RepoError::io(root, e))?;
            read_tar_entries(root, file)?
        } else {
            return Err(RepoError::Structural(format!(
                "{} is neither a directory nor a supported archive",
                root.display()
            )));
        };
        strip_common_root(raw)
    };
    let kept = entries.into_iter().filter(|(p, _)| {
        normalize_path(p)
            .map(|n| !globs.is_match(&n))
            .unwrap_or(true)
    });
    RepoSnapshot::from_files(kept)
}

fn read_dir_entries(root: &Path) -> Result<Vec<(String, Vec<u8>)>, RepoError> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            RepoError::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .map_err(|e| RepoError::Structural(e.to_string()))?;
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        let bytes = fs::read(entry.path()).map_err(|e| RepoError::io(entry.path(), e))?;
        out.push((rel, bytes));
    }
    Ok(out)
}

fn read_tar_entries<R: Read>(path: &Path, reader: R) -> Result<Vec<(String, Vec<u8>)>, RepoError> {
    let mut archive = tar::Archive::new(reader);
    let mut out = Vec::new();
    for entry in archive.entries().map_err(|e| RepoError::io(path, e))? {
        let mut entry = entry.map_err(|e| RepoError::io(path, e))?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let name = entry
            .path()
            .map_err(|e| RepoError::io(path, e))?
            .to_string_lossy()
            .into_owned();
        let mut bytes = Vec::new();
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| RepoError::io(path, e))?;
        out.push((name, bytes));
    }
    Ok(out)
}

fn read_zip_entries(path: &Path) -> Result<Vec<(String, Vec<u8>)>, RepoError> {
    let file = fs::File::open(path).map_err(|e| RepoError::io(path, e))?;
    let mut archive = zip::ZipArchive::new(file)
        .map_err(|e| RepoError::Structural(format!("bad zip archive: {e}")))?;
    let mut out = Vec::new();
    for i in 0..archive.len() {
        let mut entry = archive
            .by_index(i)
            .map_err(|e| RepoError::Structural(format!("bad zip entry: {e}")))?;
        if !entry.is_file() {
            continue;
        }
        let name = entry
            .name()
            .map_err(|e| RepoError::Structural(format!("bad zip entry name: {e}")))?
            .into_owned();
        let mut bytes = Vec::new();
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| RepoError::io(path, e))?;
        out.push((name, bytes));
    }
    Ok(out)
}

fn strip_common_root(entries: Vec<(String, Vec<u8>)>) -> Vec<(String, Vec<u8>)> {
    let first_seg = |p: &str| -> Option<String> {
        let p = p.trim_start_matches("./");
        p.split_once('/').map(|(head, _)| head.to_string())
    };
    let Some(root) = entries.first().and_then(|(p, _)| first_seg(p)) else {
        return entries;
    };
    if !entries
        .iter()
        .all(|(p, _)| first_seg(p).as_deref() == Some(root.as_str()))
    {
        return entries;
    }
    entries
        .into_iter()
        .map(|(p, b)| {
            let p = p.trim_start_matches("./");
            (p[root.len() + 1..].to_string(), b)
        })
        .collect()
}

/// One numbered line of a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumberedLine {
    pub number: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NumberedText {
    pub lines: Vec<NumberedLine>,
    pub final_newline: bool,
}

impl NumberedText {
    /// Canonical numbered form: one `<n> <text>` line per source line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, line) in self.lines.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = write!(out, "{} {}", line.number, line.text);
        }
        out
    }

    pub fn to_content(&self) -> String {
        FileLines {
            lines: self.lines.iter().map(|l| l.text.clone()).collect(),
            final_newline: self.final_newline,
        }
        .to_content()
    }
}

pub fn number_lines(content: &str) -> NumberedText {
    let fl = FileLines::from_content(content);
    NumberedText {
        lines: fl
            .lines
            .into_iter()
            .enumerate()
            .map(|(i, text)| NumberedLine { number: i + 1, text })
            .collect(),
        final_newline: fl.final_newline,
    }
}
