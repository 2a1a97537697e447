//! The two-call resolution pipeline: BM25 candidates, file retrieval by the
//! retriever model, structured editing by the editor model, and the optional
//! P2P filter.

use serde::{Deserialize, Serialize};

use super::backend::{BackendError, ModelBackend, Transcript};
use super::runner::TestRunner;
use super::{
    p2p_filter, run_with_resampling, sample, validate_editing, validate_retrieval, Attempt,
    ConfigError, EditArtifacts, P2PPolicy, P2PRecord, P2PStatus, Regeneration, SamplingPolicy,
    StageFailure, StageRun, TestGate, ValidationError, Validated, Verdict,
    DEFAULT_TRANSPORT_RETRIES,
};
use crate::bm25::{Bm25Params, DocSource, SnapshotIndex, DEFAULT_TOP_K};
use crate::repo::{number_lines, RepoSnapshot};
use crate::task::{
    build_editing_input, build_retrieval_input, parse_retrieval_output, ContextBudget,
    EditingInputOptions, JsonTask, TaskError, DEFAULT_MAX_TOKENS,
};

pub const OUTCOME_SCHEMA_VERSION: u32 = 1;

/// One issue to resolve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: String,
    #[serde(alias = "problem_statement")]
    pub issue: String,
    /// Directory or archive holding the repository at the base commit.
    #[serde(default)]
    pub repo: Option<String>,
    /// Repository tests an edit must pass when test validation is on.
    #[serde(default)]
    pub tests: Vec<String>,
    #[serde(default)]
    pub p2p_tests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub top_k: usize,
    pub bm25: Bm25Params,
    pub doc_source: DocSource,
    pub sampling: SamplingPolicy,
    pub transport_retries: usize,
    /// Token budget of each model input.
    pub context_limit: usize,
    pub include_readme_retrieval: bool,
    pub include_readme_editing: bool,
    pub line_numbers: bool,
    pub validate_with_tests: bool,
    pub p2p: P2PPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            top_k: DEFAULT_TOP_K,
            bm25: Bm25Params::default(),
            doc_source: DocSource::Skeleton,
            sampling: SamplingPolicy::default(),
            transport_retries: DEFAULT_TRANSPORT_RETRIES,
            context_limit: DEFAULT_MAX_TOKENS,
            include_readme_retrieval: true,
            include_readme_editing: false,
            line_numbers: true,
            validate_with_tests: false,
            p2p: P2PPolicy::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sampling.validate()?;
        self.p2p.validate()?;
        if self.top_k == 0 {
            return Err(ConfigError("top_k must be at least 1".into()));
        }
        if self.context_limit == 0 {
            return Err(ConfigError("context_limit must be positive".into()));
        }
        if !(self.bm25.k1 >= 0.0 && (0.0..=1.0).contains(&self.bm25.b)) {
            return Err(ConfigError("bm25 needs k1 >= 0 and 0 <= b <= 1".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> ContextBudget {
        ContextBudget::new(self.context_limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeStatus {
    ResolvedCandidate,
    InvalidAfterRetries,
    BudgetExhausted,
    P2pRejected,
    /// The backend failed for reasons other than output validity.
    BackendFailed,
    /// A test runner broke, so the candidate could not be judged.
    Unevaluated,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub attempts: Vec<Attempt>,
    /// Budget and validation warnings.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub schema_version: u32,
    pub instance_id: String,
    pub status: OutcomeStatus,
    /// BM25 candidates shown to the retriever, best first.
    pub candidates: Vec<String>,
    pub retrieval: StageRecord,
    pub editing: StageRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p2p: Option<P2PRecord>,
    pub final_files: Vec<String>,
    pub final_patch: Option<String>,
    pub model_calls: usize,
    pub failure_reason: Option<String>,
    /// Per-call timings; kept out of the run log so it stays reproducible.
    #[serde(skip)]
    pub transcript: Transcript,
}

impl PipelineOutcome {
    fn new(instance_id: &str) -> Self {
        PipelineOutcome {
            schema_version: OUTCOME_SCHEMA_VERSION,
            instance_id: instance_id.to_string(),
            status: OutcomeStatus::InvalidAfterRetries,
            candidates: Vec::new(),
            retrieval: StageRecord::default(),
            editing: StageRecord::default(),
            p2p: None,
            final_files: Vec::new(),
            final_patch: None,
            model_calls: 0,
            failure_reason: None,
            transcript: Transcript::default(),
        }
    }

    pub fn p2p_attempts(&self) -> Option<usize> {
        self.p2p.as_ref().map(|p| p.attempts.len())
    }

    fn fail(mut self, status: OutcomeStatus, reason: impl ToString) -> Self {
        self.status = status;
        self.failure_reason = Some(reason.to_string());
        self
    }

    fn fail_stage(self, stage: &str, failure: StageFailure) -> Self {
        let status = match &failure {
            StageFailure::InvalidAfterRetries(_) => OutcomeStatus::InvalidAfterRetries,
            StageFailure::Backend(BackendError::BudgetExhausted { .. }) => OutcomeStatus::BudgetExhausted,
            StageFailure::Backend(_) => OutcomeStatus::BackendFailed,
            StageFailure::Runner(_) => OutcomeStatus::Unevaluated,
        };
        self.fail(status, format!("{stage}: {failure}"))
    }
}

fn task_failure(outcome: PipelineOutcome, stage: &str, err: TaskError) -> Result<PipelineOutcome, ConfigError> {
    match err {
        TaskError::BudgetExhausted { .. } => {
            Ok(outcome.fail(OutcomeStatus::BudgetExhausted, format!("{stage}: {err}")))
        }
        other => Err(ConfigError(format!("{stage}: {other}"))),
    }
}

/// Resolves one issue. Model misbehaviour ends in an outcome status; only
/// invalid configuration or input is an error.
pub fn resolve_instance(
    instance: &Instance,
    snapshot: &RepoSnapshot,
    retriever: &dyn ModelBackend,
    editor: &dyn ModelBackend,
    config: &PipelineConfig,
    runner: Option<&dyn TestRunner>,
) -> Result<PipelineOutcome, ConfigError> {
    config.validate()?;
    let index = SnapshotIndex::build(snapshot, config.bm25, config.doc_source);
    resolve_with_index(instance, snapshot, &index, retriever, editor, config, runner)
}

/// As [`resolve_instance`], reusing a prebuilt index of `snapshot`.
pub fn resolve_with_index(
    instance: &Instance,
    snapshot: &RepoSnapshot,
    index: &SnapshotIndex,
    retriever: &dyn ModelBackend,
    editor: &dyn ModelBackend,
    config: &PipelineConfig,
    runner: Option<&dyn TestRunner>,
) -> Result<PipelineOutcome, ConfigError> {
    config.validate()?;
    let mut outcome = PipelineOutcome::new(&instance.instance_id);
    let mut transcript = Transcript::default();
    let budget = config.budget();
    let readme = snapshot
        .readme_path()
        .and_then(|p| snapshot.get(p))
        .map(|f| f.content.as_str());

    // retrieval
    let docs = index.ranked_docs(&instance.issue, config.top_k);
    let retrieval_task = match build_retrieval_input(
        &instance.issue,
        readme.filter(|_| config.include_readme_retrieval),
        &docs,
        &budget,
    ) {
        Ok(task) => task,
        Err(e) => return task_failure(outcome, "retrieval", e),
    };
    outcome.candidates = retrieval_task.included.clone();
    outcome.retrieval.warnings = retrieval_task.warnings.clone();
    let candidates = outcome.candidates.clone();
    let run = run_with_resampling(
        retriever,
        &retrieval_task,
        &config.sampling,
        config.transport_retries,
        &mut transcript,
        |raw| {
            let answer = parse_retrieval_output(raw)
                .map_err(|e| super::Rejection::new(super::Stage::Parse, e.to_string()))?;
            let warnings = validate_retrieval(&answer, snapshot, &candidates)?;
            Ok(Validated {
                value: answer,
                warnings,
            })
        },
    )?;
    outcome.model_calls += run.attempts.len();
    outcome.retrieval.attempts = run.attempts;
    let answer = match run.result {
        Ok(v) => v.value,
        Err(f) => return Ok(finish(outcome.fail_stage("retrieval", f), transcript)),
    };

    // editing
    let files: Vec<(String, _)> = answer
        .files
        .iter()
        .map(|p| (p.clone(), number_lines(&snapshot.get(p).expect("validated path").content)))
        .collect();
    let options = EditingInputOptions {
        line_numbers: config.line_numbers,
        readme: readme.filter(|_| config.include_readme_editing),
    };
    let editing_task = match build_editing_input(&instance.issue, &files, &budget, options) {
        Ok(task) => task,
        Err(e) => return task_failure(finish(outcome, transcript.clone()), "editing", e),
    };
    outcome.editing.warnings = editing_task.warnings.clone();
    let gate = runner
        .filter(|_| config.validate_with_tests)
        .map(|runner| TestGate {
            runner,
            tests: &instance.tests,
        });
    let run: StageRun<EditArtifacts> = run_with_resampling(
        editor,
        &editing_task,
        &config.sampling,
        config.transport_retries,
        &mut transcript,
        |raw| validate_editing(raw, snapshot, gate),
    )?;
    outcome.model_calls += run.attempts.len();
    let accepted_temperature = run.attempts.last().map(|a| a.temperature).unwrap_or(0.0);
    outcome.editing.attempts = run.attempts;
    let mut artifacts = match run.result {
        Ok(v) => v.value,
        Err(f) => return Ok(finish(outcome.fail_stage("editing", f), transcript)),
    };

    // P2P filter
    let p2p_runner = runner.filter(|_| config.p2p.enabled && !instance.p2p_tests.is_empty());
    if let Some(p2p_runner) = p2p_runner {
        let (record, kept) = p2p_filter(
            artifacts,
            accepted_temperature,
            &instance.p2p_tests,
            p2p_runner,
            &config.p2p,
            &mut |temperature| {
                regenerate(editor, &editing_task, temperature, snapshot, gate, config, &mut transcript)
            },
        )?;
        outcome.model_calls += record.model_calls();
        let status = record.status;
        let error = record.error.clone();
        outcome.p2p = Some(record);
        match (status, kept) {
            (P2PStatus::Retained, Some(a)) => artifacts = a,
            (P2PStatus::Unevaluated, kept) => {
                if let Some(a) = kept {
                    outcome.final_files = a.changed_files;
                    outcome.final_patch = Some(a.patch.render());
                }
                let reason = error.unwrap_or_default();
                return Ok(finish(outcome.fail(OutcomeStatus::Unevaluated, format!("p2p: {reason}")), transcript));
            }
            (P2PStatus::BackendFailed, _) => {
                let reason = error.unwrap_or_default();
                return Ok(finish(outcome.fail(OutcomeStatus::BackendFailed, format!("p2p: {reason}")), transcript));
            }
            _ => {
                return Ok(finish(
                    outcome.fail(OutcomeStatus::P2pRejected, "p2p: every candidate patch broke a P2P test"),
                    transcript,
                ))
            }
        }
    }

    outcome.status = OutcomeStatus::ResolvedCandidate;
    outcome.final_files = artifacts.changed_files;
    outcome.final_patch = Some(artifacts.patch.render());
    Ok(finish(outcome, transcript))
}

fn regenerate(
    editor: &dyn ModelBackend,
    task: &JsonTask,
    temperature: f64,
    snapshot: &RepoSnapshot,
    gate: Option<TestGate<'_>>,
    config: &PipelineConfig,
    transcript: &mut Transcript,
) -> Result<Regeneration, BackendError> {
    let raw = sample(editor, task, temperature, config.transport_retries, transcript)?;
    Ok(match validate_editing(&raw, snapshot, gate) {
        Ok(v) => Regeneration::Valid(
            Attempt {
                temperature,
                raw,
                verdict: Verdict::Accepted { warnings: v.warnings },
            },
            v.value,
        ),
        Err(ValidationError::Rejected(r)) => Regeneration::Invalid(Attempt {
            temperature,
            raw,
            verdict: Verdict::Rejected(r),
        }),
        Err(ValidationError::Runner(e)) => Regeneration::Invalid(Attempt {
            temperature,
            raw,
            verdict: Verdict::Rejected(super::Rejection::new(super::Stage::Tests, e.to_string())),
        }),
    })
}

fn finish(mut outcome: PipelineOutcome, transcript: Transcript) -> PipelineOutcome {
    outcome.transcript = transcript;
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::backend::ScriptedBackend;
    use crate::inference::runner::{SimulatedRunner, TestVerdict};
    use serde_json::json;

    fn snap() -> RepoSnapshot {
        RepoSnapshot::from_files([
            ("README.md", "# demo\n"),
            ("pkg/mathops.py", "def add(a, b):\n    return a - b\n"),
            ("pkg/strings.py", "def shout(s):\n    return s.upper()\n"),
        ])
        .unwrap()
    }

    fn instance() -> Instance {
        Instance {
            instance_id: "demo-1".into(),
            issue: "add returns the difference instead of the sum in mathops".into(),
            repo: None,
            tests: vec![],
            p2p_tests: vec!["test_add".into()],
        }
    }

    const RETRIEVAL: &str = r#"{"files_to_edit": ["pkg/mathops.py"]}"#;

    fn edit(new_line: &str) -> String {
        json!({"reasoning": "fix", "edits": [{"file": "pkg/mathops.py",
            "code_snippet_to_be_modified": "2     return a - b",
            "edited_code_snippet": new_line}]})
        .to_string()
    }

    #[test]
    fn two_calls_on_the_happy_path() {
        let r = ScriptedBackend::sequence([RETRIEVAL]);
        let e = ScriptedBackend::sequence([edit("    return a + b")]);
        let out = resolve_instance(&instance(), &snap(), &r, &e, &PipelineConfig::default(), None).unwrap();
        assert_eq!(out.status, OutcomeStatus::ResolvedCandidate);
        assert_eq!(out.model_calls, 2);
        assert_eq!(out.final_files, ["pkg/mathops.py"]);
        assert_eq!(out.candidates[0], "pkg/mathops.py");
        assert!(out.final_patch.unwrap().contains("+    return a + b"));
    }

    #[test]
    fn retrieval_exhaustion_skips_editing() {
        let r = ScriptedBackend::sequence(["nonsense"]);
        let e = ScriptedBackend::sequence([edit("    return a + b")]);
        let out = resolve_instance(&instance(), &snap(), &r, &e, &PipelineConfig::default(), None).unwrap();
        assert_eq!(out.status, OutcomeStatus::InvalidAfterRetries);
        assert_eq!(out.model_calls, 5);
        assert_eq!(e.calls(), 0);
    }

    #[test]
    fn editing_exhaustion_counts_six_calls() {
        let r = ScriptedBackend::sequence([RETRIEVAL]);
        let e = ScriptedBackend::sequence(["{}"]);
        let out = resolve_instance(&instance(), &snap(), &r, &e, &PipelineConfig::default(), None).unwrap();
        assert_eq!(out.status, OutcomeStatus::InvalidAfterRetries);
        assert_eq!(out.model_calls, 6);
    }

    fn p2p_config() -> PipelineConfig {
        PipelineConfig {
            p2p: P2PPolicy {
                enabled: true,
                max_attempts: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn sum_runner() -> SimulatedRunner {
        SimulatedRunner::new(|s, _| {
            let ok = s.get("pkg/mathops.py").unwrap().content.contains("a + b");
            Ok(if ok { TestVerdict::Pass } else { TestVerdict::Fail })
        })
    }

    #[test]
    fn p2p_regenerates_after_failure() {
        let r = ScriptedBackend::sequence([RETRIEVAL]);
        let e = ScriptedBackend::sequence([edit("    return a * b"), edit("    return a + b")]);
        let runner = sum_runner();
        let out = resolve_instance(&instance(), &snap(), &r, &e, &p2p_config(), Some(&runner)).unwrap();
        assert_eq!(out.status, OutcomeStatus::ResolvedCandidate);
        let p2p = out.p2p.unwrap();
        let temps: Vec<f64> = p2p.attempts.iter().map(|a| a.temperature).collect();
        assert_eq!(temps, [0.0, 0.0]);
        assert_eq!(out.model_calls, 3);
    }

    #[test]
    fn p2p_exhaustion_rejects() {
        let r = ScriptedBackend::sequence([RETRIEVAL]);
        let e = ScriptedBackend::sequence([edit("    return a * b")]);
        let runner = sum_runner();
        let out = resolve_instance(&instance(), &snap(), &r, &e, &p2p_config(), Some(&runner)).unwrap();
        assert_eq!(out.status, OutcomeStatus::P2pRejected);
        let temps: Vec<f64> = out.p2p.as_ref().unwrap().attempts.iter().map(|a| a.temperature).collect();
        assert_eq!(temps, [0.0, 0.0, 0.7]);
        assert_eq!(out.model_calls, 4);
        assert!(out.final_patch.is_none());
    }

    #[test]
    fn runner_crash_is_unevaluated() {
        let r = ScriptedBackend::sequence([RETRIEVAL]);
        let e = ScriptedBackend::sequence([edit("    return a + b")]);
        let runner = SimulatedRunner::new(|_, _| Err("segfault".into()));
        let out = resolve_instance(&instance(), &snap(), &r, &e, &p2p_config(), Some(&runner)).unwrap();
        assert_eq!(out.status, OutcomeStatus::Unevaluated);
    }

    #[test]
    fn tiny_budget_is_budget_exhausted() {
        let r = ScriptedBackend::sequence([RETRIEVAL]);
        let e = ScriptedBackend::sequence([edit("    return a + b")]);
        let config = PipelineConfig {
            context_limit: 10,
            ..Default::default()
        };
        let out = resolve_instance(&instance(), &snap(), &r, &e, &config, None).unwrap();
        assert_eq!(out.status, OutcomeStatus::BudgetExhausted);
        assert_eq!(out.model_calls, 0);
    }

    #[test]
    fn outcome_serializes_without_transcript() {
        let r = ScriptedBackend::sequence([RETRIEVAL]);
        let e = ScriptedBackend::sequence([edit("    return a + b")]);
        let out = resolve_instance(&instance(), &snap(), &r, &e, &PipelineConfig::default(), None).unwrap();
        assert_eq!(out.transcript.entries.len(), 2);
        let v = serde_json::to_value(&out).unwrap();
        assert_eq!(v["status"], "resolved-candidate");
        assert!(v.get("transcript").is_none());
        assert_eq!(v["retrieval"]["attempts"][0]["verdict"], "accepted");
    }
}
