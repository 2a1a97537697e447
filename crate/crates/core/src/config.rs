//! Run configuration loaded from TOML. Values resolve as command-line flag,
//! then config file, then built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm25::{Bm25Params, DocSource, DEFAULT_TOP_K};
use crate::dataset::{DatasetConfig, DEFAULT_MAX_EDITED_FILES};
use crate::inference::backend::{BackendError, HttpBackend, HttpBackendConfig, ModelBackend, ScriptedBackend};
use crate::inference::runner::CommandRunner;
use crate::inference::{P2PPolicy, PipelineConfig, SamplingPolicy, DEFAULT_TRANSPORT_RETRIES};
use crate::task::DEFAULT_MAX_TOKENS;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    /// Replies from a JSON script file.
    Scripted { script: PathBuf },
    Http(HttpBackendConfig),
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn ModelBackend>, BackendError> {
        match self {
            BackendConfig::Scripted { script } => {
                let text = std::fs::read_to_string(script)
                    .map_err(|e| BackendError::Fatal(format!("cannot read {}: {e}", script.display())))?;
                Ok(Box::new(ScriptedBackend::from_json(&text)?))
            }
            BackendConfig::Http(c) => Ok(Box::new(HttpBackend::new(c.clone())?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub workers: usize,
    /// Directory that snapshot references resolve against.
    pub snapshot_root: Option<PathBuf>,
    pub retriever: Option<BackendConfig>,
    pub editor: Option<BackendConfig>,
    pub test_runner: Option<CommandRunner>,

    pub top_k: usize,
    pub bm25: Bm25Params,
    pub doc_source: DocSource,
    pub context_limit: usize,
    pub include_readme_retrieval: bool,
    pub include_readme_editing: bool,
    pub line_numbers: bool,
    pub validate_with_tests: bool,
    pub sampling: SamplingPolicy,
    pub transport_retries: usize,
    pub p2p: P2PPolicy,

    pub max_edited_files: usize,
    pub excluded_repos: Vec<String>,
    pub cot_sample_size: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("out"),
            workers: 1,
            snapshot_root: None,
            retriever: None,
            editor: None,
            test_runner: None,
            top_k: DEFAULT_TOP_K,
            bm25: Bm25Params::default(),
            doc_source: DocSource::Skeleton,
            context_limit: DEFAULT_MAX_TOKENS,
            include_readme_retrieval: true,
            include_readme_editing: false,
            line_numbers: true,
            validate_with_tests: false,
            sampling: SamplingPolicy::default(),
            transport_retries: DEFAULT_TRANSPORT_RETRIES,
            p2p: P2PPolicy::default(),
            max_edited_files: DEFAULT_MAX_EDITED_FILES,
            excluded_repos: Vec::new(),
            cot_sample_size: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(root) = self.snapshot_root.as_mut() {
            fix(root);
        }
        for backend in [self.retriever.as_mut(), self.editor.as_mut()].into_iter().flatten() {
            if let BackendConfig::Scripted { script } = backend {
                fix(script);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            top_k: self.top_k,
            bm25: self.bm25,
            doc_source: self.doc_source,
            sampling: self.sampling,
            transport_retries: self.transport_retries,
            context_limit: self.context_limit,
            include_readme_retrieval: self.include_readme_retrieval,
            include_readme_editing: self.include_readme_editing,
            line_numbers: self.line_numbers,
            validate_with_tests: self.validate_with_tests,
            p2p: self.p2p.clone(),
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            max_edited_files: self.max_edited_files,
            excluded_repos: self.excluded_repos.clone(),
            top_k: self.top_k,
            bm25: self.bm25,
            doc_source: self.doc_source,
            context_limit: self.context_limit,
            include_readme_retrieval: self.include_readme_retrieval,
            include_readme_editing: self.include_readme_editing,
            line_numbers: self.line_numbers,
            cot_sample_size: self.cot_sample_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.0))?;
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if self.max_edited_files == 0 {
            return Err(ConfigError::Invalid("max_edited_files must be at least 1".into()));
        }
        if let Some(root) = &self.snapshot_root {
            if !root.is_dir() {
                return Err(ConfigError::Invalid(format!(
                    "snapshot_root {} is not a directory",
                    root.display()
                )));
            }
        }
        for backend in [&self.retriever, &self.editor].into_iter().flatten() {
            if let BackendConfig::Scripted { script } = backend {
                if !script.is_file() {
                    return Err(ConfigError::Invalid(format!("script {} does not exist", script.display())));
                }
            }
        }
        Ok(())
    }
}
