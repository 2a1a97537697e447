//! Python bindings: repository snapshots, skeletons, BM25 retrieval, edit
//! application and patch synthesis, and the scripted end-to-end pipeline.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyKeyError};
use pyo3::prelude::*;

use issuefix_core::bm25::{self, Bm25Index, Bm25Params, DocSource, SnapshotIndex};
use issuefix_core::edit::{self, SyntaxCheck};
use issuefix_core::inference::{self, Instance, PipelineConfig, ScriptedBackend};
use issuefix_core::repo::{self, RepoSnapshot};
use issuefix_core::skeleton;
use issuefix_core::task;

create_exception!(issuefix, IssuefixError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    IssuefixError::new_err(e.to_string())
}

/// Immutable repository snapshot.
#[pyclass(name = "Repo", module = "issuefix", frozen)]
struct PyRepo {
    inner: RepoSnapshot,
}

#[pymethods]
impl PyRepo {
    #[new]
    fn new(files: HashMap<String, String>) -> PyResult<Self> {
        let inner = RepoSnapshot::from_files(files).map_err(err)?;
        Ok(PyRepo { inner })
    }

    /// Loads a directory or archive, skipping paths matching `exclusions`.
    #[staticmethod]
    #[pyo3(signature = (path, exclusions=None))]
    fn load(path: PathBuf, exclusions: Option<Vec<String>>) -> PyResult<Self> {
        let exclusions = exclusions.unwrap_or_else(repo::default_exclusions);
        let inner = repo::load_snapshot(&path, &exclusions).map_err(err)?;
        Ok(PyRepo { inner })
    }

    #[getter]
    fn root_id(&self) -> &str {
        self.inner.root_id()
    }

    fn paths(&self) -> Vec<String> {
        self.inner.paths().map(str::to_string).collect()
    }

    fn read(&self, path: &str) -> PyResult<String> {
        self.inner
            .get(path)
            .map(|f| f.content.clone())
            .ok_or_else(|| PyKeyError::new_err(path.to_string()))
    }

    fn skeleton(&self, path: &str) -> PyResult<String> {
        let file = self
            .inner
            .get(path)
            .ok_or_else(|| PyKeyError::new_err(path.to_string()))?;
        Ok(skeleton::extract_skeleton(file).rendered)
    }

    /// BM25 index over the non-test source files.
    #[pyo3(signature = (k1=1.2, b=0.75, content=false))]
    fn index(&self, k1: f64, b: f64, content: bool) -> PyBm25 {
        let source = if content { DocSource::Content } else { DocSource::Skeleton };
        let built = SnapshotIndex::build(&self.inner, Bm25Params { k1, b }, source);
        PyBm25 { inner: built.index }
    }

    /// Applies a structured edit (the editing model's JSON) and returns the
    /// edited snapshot and its unified diff.
    fn apply_edit(&self, edit_json: &str) -> PyResult<(PyRepo, String)> {
        let structured = task::parse_editing_output(edit_json).map_err(err)?;
        let applied = edit::apply_edits(&self.inner, &structured).map_err(err)?;
        let patch = edit::to_unified_patch(&self.inner, &applied.snapshot).render();
        Ok((PyRepo { inner: applied.snapshot }, patch))
    }

    fn apply_patch(&self, patch: &str) -> PyResult<PyRepo> {
        let parsed = edit::parse_unified_patch(patch).map_err(err)?;
        let inner = edit::apply_patch(&self.inner, &parsed).map_err(err)?;
        Ok(PyRepo { inner })
    }

    /// Unified diff from this snapshot to `other`.
    fn diff(&self, other: &PyRepo) -> String {
        edit::to_unified_patch(&self.inner, &other.inner).render()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, path: &str) -> bool {
        self.inner.contains(path)
    }

    fn __repr__(&self) -> String {
        format!("Repo(root_id={:?}, files={})", self.inner.root_id(), self.inner.len())
    }
}

#[pyclass(name = "Bm25Index", module = "issuefix", frozen)]
struct PyBm25 {
    inner: Bm25Index,
}

#[pymethods]
impl PyBm25 {
    #[new]
    #[pyo3(signature = (docs, k1=1.2, b=0.75))]
    fn new(docs: Vec<(String, String)>, k1: f64, b: f64) -> PyResult<Self> {
        let inner = Bm25Index::build(&docs, Bm25Params { k1, b }).map_err(err)?;
        Ok(PyBm25 { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyBm25 {
            inner: Bm25Index::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn top_k(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        self.inner.top_k(query, k)
    }

    fn score(&self, query: &str, path: &str) -> PyResult<f64> {
        let doc = self
            .inner
            .doc_id(path)
            .ok_or_else(|| PyKeyError::new_err(path.to_string()))?;
        self.inner.score(&bm25::tokenize(query), doc).map_err(err)
    }

    fn idf(&self, term: &str) -> f64 {
        self.inner.idf(term)
    }

    fn __len__(&self) -> usize {
        self.inner.doc_count()
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    bm25::tokenize(text)
}

/// `None` when `content` parses, else `(line, column, message)`.
#[pyfunction]
#[pyo3(signature = (content, language="python"))]
fn check_syntax(content: &str, language: &str) -> PyResult<Option<(usize, usize, String)>> {
    Ok(match edit::check_syntax(content, language).map_err(err)? {
        SyntaxCheck::Ok => None,
        SyntaxCheck::SyntaxError(d) => Some((d.line, d.column, d.message)),
    })
}

#[pyfunction]
fn parse_retrieval_output(text: &str) -> PyResult<Vec<String>> {
    Ok(task::parse_retrieval_output(text).map_err(err)?.files)
}

/// Validates an editing-model reply and returns it as canonical JSON.
#[pyfunction]
fn parse_editing_output(text: &str) -> PyResult<String> {
    Ok(task::parse_editing_output(text).map_err(err)?.to_json())
}

/// Runs the full pipeline on one instance with scripted model replies and
/// returns the outcome record as JSON.
#[pyfunction]
#[pyo3(signature = (instance_json, repo, retriever_script, editor_script, config_json=None))]
fn resolve(
    py: Python<'_>,
    instance_json: &str,
    repo: &PyRepo,
    retriever_script: &str,
    editor_script: &str,
    config_json: Option<&str>,
) -> PyResult<String> {
    let instance: Instance = serde_json::from_str(instance_json).map_err(err)?;
    let config: PipelineConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(err)?,
        None => PipelineConfig::default(),
    };
    let retriever = ScriptedBackend::from_json(retriever_script).map_err(err)?;
    let editor = ScriptedBackend::from_json(editor_script).map_err(err)?;
    let outcome = py
        .detach(|| inference::resolve_instance(&instance, &repo.inner, &retriever, &editor, &config, None))
        .map_err(err)?;
    serde_json::to_string(&outcome).map_err(err)
}

#[pymodule]
fn issuefix(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IssuefixError", m.py().get_type::<IssuefixError>())?;
    m.add_class::<PyRepo>()?;
    m.add_class::<PyBm25>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(check_syntax, m)?)?;
    m.add_function(wrap_pyfunction!(parse_retrieval_output, m)?)?;
    m.add_function(wrap_pyfunction!(parse_editing_output, m)?)?;
    m.add_function(wrap_pyfunction!(resolve, m)?)?;
    Ok(())
}
