//! Command-line entry points: `index`, `run`, `prepare-data`,
//! `eval-retrieval` and `stats`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm25::{Bm25Params, DocSource, SnapshotIndex};
use crate::config::{BackendConfig, ConfigError, RunConfig};
use crate::dataset::{
    compute_statistics, prepare_dataset, read_jsonl, read_raw_instances, write_jsonl, CorpusStats,
    DatasetError, PreparedData,
};
use crate::inference::pipeline::{resolve_with_index, Instance, OutcomeStatus, PipelineOutcome};
use crate::inference::runner::TestRunner;
use crate::repo::{default_exclusions, load_snapshot, RepoError, RepoSnapshot};

pub const INDEX_FILE: &str = "index.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const PATCH_DIR: &str = "patches";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
}

impl CliError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Repo(_) => "repository",
            CliError::Dataset(_) => "dataset",
            CliError::Io { .. } => "io",
            CliError::Input(_) => "input",
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "issuefix", version, about = "Retrieve, edit and patch: issue resolution over a repository snapshot")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the BM25 index of a repository.
    Index {
        /// Repository directory or archive (.tar, .tar.gz, .zip).
        repo: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Resolve every instance of a JSONL file.
    Run {
        instances: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Build retrieval and editing training data from raw instances.
    PrepareData {
        raws: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Precision and recall of predicted files against gold files.
    EvalRetrieval { predictions: PathBuf, gold: PathBuf },
    /// Edit-size statistics of a raw instance file.
    Stats { raws: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DocSourceArg {
    Skeleton,
    Content,
}

/// Overrides for values that may also come from the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub snapshot_root: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long, value_enum)]
    pub doc_source: Option<DocSourceArg>,
    #[arg(long)]
    pub context_limit: Option<usize>,
    #[arg(long)]
    pub include_readme_retrieval: Option<bool>,
    #[arg(long)]
    pub include_readme_editing: Option<bool>,
    #[arg(long)]
    pub line_numbers: Option<bool>,
    #[arg(long)]
    pub validate_with_tests: Option<bool>,
    #[arg(long)]
    pub max_attempts: Option<usize>,
    #[arg(long)]
    pub p2p: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scripted retriever backend (JSON script).
    #[arg(long)]
    pub retriever_script: Option<PathBuf>,
    /// Scripted editor backend (JSON script).
    #[arg(long)]
    pub editor_script: Option<PathBuf>,
}

impl CommonArgs {
    /// Flag over config file over default.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            output_dir => c.output_dir,
            workers => c.workers,
            top_k => c.top_k,
            k1 => c.bm25.k1,
            b => c.bm25.b,
            context_limit => c.context_limit,
            include_readme_retrieval => c.include_readme_retrieval,
            include_readme_editing => c.include_readme_editing,
            line_numbers => c.line_numbers,
            validate_with_tests => c.validate_with_tests,
            max_attempts => c.sampling.max_attempts,
            p2p => c.p2p.enabled,
            seed => c.seed,
        );
        if let Some(root) = &self.snapshot_root {
            c.snapshot_root = Some(root.clone());
        }
        if let Some(source) = self.doc_source {
            c.doc_source = match source {
                DocSourceArg::Skeleton => DocSource::Skeleton,
                DocSourceArg::Content => DocSource::Content,
            };
        }
        if let Some(script) = &self.retriever_script {
            c.retriever = Some(BackendConfig::Scripted { script: script.clone() });
        }
        if let Some(script) = &self.editor_script {
            c.editor = Some(BackendConfig::Scripted { script: script.clone() });
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format: String,
    pub version: u32,
    pub root_id: String,
    pub total_files: usize,
    pub source_files_indexed: usize,
    pub fallback_files: usize,
    pub fallback_paths: Vec<String>,
    pub doc_source: DocSource,
    pub bm25: Bm25Params,
    pub terms: usize,
}

/// Indexes `repo` and writes `index.json` and `manifest.json` into `out`.
pub fn cmd_index(repo: &Path, out: &Path, config: &RunConfig) -> Result<IndexManifest, CliError> {
    let snapshot = load_snapshot(repo, &default_exclusions())?;
    let index = SnapshotIndex::build(&snapshot, config.bm25, config.doc_source);
    let mut fallback_paths: Vec<String> = index
        .docs
        .values()
        .filter(|d| d.fallback)
        .map(|d| d.path.clone())
        .collect();
    fallback_paths.sort();
    let manifest = IndexManifest {
        format: "issuefix-index-manifest".into(),
        version: 1,
        root_id: snapshot.root_id().to_string(),
        total_files: snapshot.len(),
        source_files_indexed: index.index.doc_count(),
        fallback_files: fallback_paths.len(),
        fallback_paths,
        doc_source: config.doc_source,
        bm25: config.bm25,
        terms: index.index.terms().count(),
    };
    write_file(&out.join(INDEX_FILE), &index.index.to_json())?;
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(&out.join(MANIFEST_FILE), &text)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub instances: usize,
    pub resolved_candidates: usize,
    pub statuses: BTreeMap<String, usize>,
    pub mean_model_calls: f64,
    /// Mean over instances that went through the P2P filter.
    pub mean_p2p_attempts: f64,
}

impl RunSummary {
    pub fn of(outcomes: &[PipelineOutcome]) -> Self {
        let mut statuses = BTreeMap::new();
        for o in outcomes {
            let key = serde_json::to_value(o.status).unwrap().as_str().unwrap().to_string();
            *statuses.entry(key).or_insert(0) += 1;
        }
        let mean = |xs: Vec<usize>| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<usize>() as f64 / xs.len() as f64
            }
        };
        RunSummary {
            instances: outcomes.len(),
            resolved_candidates: outcomes
                .iter()
                .filter(|o| o.status == OutcomeStatus::ResolvedCandidate)
                .count(),
            statuses,
            mean_model_calls: mean(outcomes.iter().map(|o| o.model_calls).collect()),
            mean_p2p_attempts: mean(outcomes.iter().filter_map(|o| o.p2p_attempts()).collect()),
        }
    }

    pub fn line(&self) -> String {
        let statuses: Vec<String> = self.statuses.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!(
            "instances={} resolved_candidates={} mean_model_calls={:.2} mean_p2p_attempts={:.2} [{}]",
            self.instances,
            self.resolved_candidates,
            self.mean_model_calls,
            self.mean_p2p_attempts,
            statuses.join(" ")
        )
    }
}

fn patch_file_name(instance_id: &str) -> String {
    let safe: String = instance_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.patch")
}

/// Resolves every instance and writes `run_log.jsonl` plus
/// `patches/<instance_id>.patch` for resolved candidates. Model failures are
/// recorded per instance; only setup problems are errors.
pub fn cmd_run(instances_path: &Path, config: &RunConfig) -> Result<RunSummary, CliError> {
    let instances: Vec<Instance> = read_jsonl(instances_path)?;
    let mut ids = BTreeSet::new();
    for inst in &instances {
        if !ids.insert(inst.instance_id.as_str()) {
            return Err(CliError::Input(format!("duplicate instance id {}", inst.instance_id)));
        }
        if inst.issue.trim().is_empty() {
            return Err(CliError::Input(format!("instance {} has an empty issue", inst.instance_id)));
        }
    }
    let base = config
        .snapshot_root
        .clone()
        .unwrap_or_else(|| instances_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    let mut repo_paths: BTreeMap<PathBuf, usize> = BTreeMap::new();
    let mut instance_repo = Vec::with_capacity(instances.len());
    for inst in &instances {
        let repo = inst
            .repo
            .as_deref()
            .ok_or_else(|| CliError::Input(format!("instance {} names no repo", inst.instance_id)))?;
        let path = base.join(repo);
        let next = repo_paths.len();
        instance_repo.push(*repo_paths.entry(path).or_insert(next));
    }

    let pipeline = config.pipeline();
    let backend_config = |b: &Option<BackendConfig>, role: &str| {
        b.as_ref()
            .ok_or_else(|| CliError::Config(ConfigError::Invalid(format!("no {role} backend configured"))))?
            .build()
            .map_err(|e| CliError::Config(ConfigError::Invalid(format!("{role} backend: {e}"))))
    };
    let retriever = if instances.is_empty() { None } else { Some(backend_config(&config.retriever, "retriever")?) };
    let editor = if instances.is_empty() { None } else { Some(backend_config(&config.editor, "editor")?) };
    let runner: Option<&dyn TestRunner> = config.test_runner.as_ref().map(|r| r as &dyn TestRunner);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| CliError::Input(e.to_string()))?;
    let outcomes: Vec<PipelineOutcome> = pool.install(|| -> Result<_, CliError> {
        let mut repos: Vec<(&PathBuf, usize)> = repo_paths.iter().map(|(p, i)| (p, *i)).collect();
        repos.sort_by_key(|(_, i)| *i);
        let corpora: Vec<(RepoSnapshot, SnapshotIndex)> = repos
            .par_iter()
            .map(|(path, _)| -> Result<_, CliError> {
                let snapshot = load_snapshot(path, &default_exclusions())?;
                let index = SnapshotIndex::build(&snapshot, pipeline.bm25, pipeline.doc_source);
                Ok((snapshot, index))
            })
            .collect::<Result<_, _>>()?;
        instances
            .par_iter()
            .zip(instance_repo.par_iter())
            .map(|(inst, &repo)| {
                let (snapshot, index) = &corpora[repo];
                resolve_with_index(
                    inst,
                    snapshot,
                    index,
                    retriever.as_deref().expect("backend present"),
                    editor.as_deref().expect("backend present"),
                    &pipeline,
                    runner,
                )
                .map_err(|e| CliError::Config(ConfigError::Invalid(e.0)))
            })
            .collect()
    })?;

    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_jsonl(&out.join(RUN_LOG_FILE), &outcomes)?;
    let patch_dir = out.join(PATCH_DIR);
    if patch_dir.is_dir() {
        for entry in fs::read_dir(&patch_dir).map_err(|e| CliError::io(&patch_dir, e))? {
            let path = entry.map_err(|e| CliError::io(&patch_dir, e))?.path();
            if path.extension().is_some_and(|e| e == "patch") {
                fs::remove_file(&path).map_err(|e| CliError::io(&path, e))?;
            }
        }
    }
    fs::create_dir_all(&patch_dir).map_err(|e| CliError::io(&patch_dir, e))?;
    for o in &outcomes {
        if o.status == OutcomeStatus::ResolvedCandidate {
            if let Some(patch) = &o.final_patch {
                write_file(&patch_dir.join(patch_file_name(&o.instance_id)), patch)?;
            }
        }
    }
    Ok(RunSummary::of(&outcomes))
}

/// Runs the curation pass over raw instances and writes its artifacts to
/// the output directory.
pub fn cmd_prepare_data(raws_path: &Path, config: &RunConfig) -> Result<PreparedData, CliError> {
    let raws = read_raw_instances(raws_path)?;
    let root = config
        .snapshot_root
        .clone()
        .unwrap_or_else(|| raws_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    let cache: Mutex<HashMap<String, RepoSnapshot>> = Mutex::new(HashMap::new());
    let load = |reference: &str| -> Result<RepoSnapshot, RepoError> {
        if let Some(s) = cache.lock().unwrap().get(reference) {
            return Ok(s.clone());
        }
        let snapshot = load_snapshot(&root.join(reference), &default_exclusions())?;
        cache.lock().unwrap().insert(reference.to_string(), snapshot.clone());
        Ok(snapshot)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| CliError::Input(e.to_string()))?;
    let data = pool.install(|| prepare_dataset(&raws, &load, &config.dataset()))?;
    data.write(&config.output_dir)?;
    Ok(data)
}

/// Drop counts by stage and reason, one row per line.
pub fn drop_table_text(data: &PreparedData) -> String {
    let mut out = format!(
        "instances={} kept={} retrieval_examples={} editing_examples={} cot_requests={}\n",
        data.reports.len(),
        data.kept_count(),
        data.retrieval.len(),
        data.editing.len(),
        data.cot_requests.len()
    );
    out.push_str(&format!("{:<10} {:<20} {:>6}\n", "stage", "reason", "count"));
    for ((stage, reason), n) in data.drop_table() {
        out.push_str(&format!("{:<10} {:<20} {:>6}\n", stage, reason.as_str(), n));
    }
    out
}

/// A predicted or gold file list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileListRecord {
    pub instance_id: String,
    #[serde(alias = "files_to_edit", alias = "final_files")]
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub instance_id: String,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub instances: usize,
    /// Macro averages, in percent.
    pub precision: f64,
    pub recall: f64,
    pub per_instance: Vec<InstanceScore>,
}

/// Per-instance precision and recall, macro-averaged. An empty prediction
/// has precision 0.
pub fn score_retrieval(predictions: &[FileListRecord], gold: &[FileListRecord]) -> Result<RetrievalReport, CliError> {
    let pred: BTreeMap<&str, &FileListRecord> = predictions.iter().map(|r| (r.instance_id.as_str(), r)).collect();
    let gold: BTreeMap<&str, &FileListRecord> = gold.iter().map(|r| (r.instance_id.as_str(), r)).collect();
    let only_pred: Vec<&str> = pred.keys().filter(|k| !gold.contains_key(*k)).copied().collect();
    let only_gold: Vec<&str> = gold.keys().filter(|k| !pred.contains_key(*k)).copied().collect();
    if !only_pred.is_empty() || !only_gold.is_empty() {
        return Err(CliError::Input(format!(
            "instance ids differ: predictions only [{}], gold only [{}]",
            only_pred.join(", "),
            only_gold.join(", ")
        )));
    }
    let mut per_instance = Vec::with_capacity(gold.len());
    for (id, g) in &gold {
        let p: BTreeSet<&str> = pred[id].files.iter().map(String::as_str).collect();
        let g: BTreeSet<&str> = g.files.iter().map(String::as_str).collect();
        let hit = p.intersection(&g).count() as f64;
        per_instance.push(InstanceScore {
            instance_id: id.to_string(),
            precision: if p.is_empty() { 0.0 } else { hit / p.len() as f64 },
            recall: if g.is_empty() { 1.0 } else { hit / g.len() as f64 },
        });
    }
    let n = per_instance.len();
    let avg = |f: fn(&InstanceScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            100.0 * per_instance.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(RetrievalReport {
        instances: n,
        precision: avg(|s| s.precision),
        recall: avg(|s| s.recall),
        per_instance,
    })
}

pub fn cmd_eval_retrieval(predictions: &Path, gold: &Path) -> Result<RetrievalReport, CliError> {
    score_retrieval(&read_jsonl(predictions)?, &read_jsonl(gold)?)
}

pub fn cmd_stats(raws: &Path) -> Result<CorpusStats, CliError> {
    Ok(compute_statistics(&read_raw_instances(raws)?))
}

/// BM25-only retrieval: the top `k` files for the issue.
pub fn bm25_baseline(index: &SnapshotIndex, issue: &str, k: usize) -> Vec<String> {
    index.index.top_k(issue, k).into_iter().map(|(p, _)| p).collect()
}

fn report_error(err: &CliError) -> i32 {
    let payload = serde_json::json!({"error": {"kind": err.kind(), "message": err.to_string()}});
    eprintln!("{payload}");
    1
}

/// Runs the CLI and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result: Result<(), CliError> = (|| {
        match cli.command {
            Command::Index { repo, common } => {
                let config = common.resolve()?;
                let manifest = cmd_index(&repo, &config.output_dir, &config)?;
                println!(
                    "indexed {} source files ({} fallback) into {}",
                    manifest.source_files_indexed,
                    manifest.fallback_files,
                    config.output_dir.display()
                );
            }
            Command::Run { instances, common } => {
                let config = common.resolve()?;
                println!("{}", cmd_run(&instances, &config)?.line());
            }
            Command::PrepareData { raws, common } => {
                let config = common.resolve()?;
                let data = cmd_prepare_data(&raws, &config)?;
                print!("{}", drop_table_text(&data));
            }
            Command::EvalRetrieval { predictions, gold } => {
                let report = cmd_eval_retrieval(&predictions, &gold)?;
                println!(
                    "instances={} precision={:.1}% recall={:.1}%",
                    report.instances, report.precision, report.recall
                );
            }
            Command::Stats { raws } => {
                println!("{}", serde_json::to_string_pretty(&cmd_stats(&raws)?).expect("stats serialize"));
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}
