//! Model calls under the resampling policy, output validation, P2P
//! filtering, and the two-call issue resolution pipeline.

pub mod backend;
pub mod pipeline;
pub mod runner;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edit::{apply_edits, check_file_syntax, to_unified_patch, EditError, SyntaxCheck, UnifiedPatch};
use crate::repo::RepoSnapshot;
use crate::task::{parse_editing_output, JsonTask, RetrievalAnswer, StructuredEdit};
use backend::{generate, BackendError, ModelBackend, Transcript};
use runner::{failing_tests, RunnerError, TestRunner};

pub use backend::{HttpBackend, HttpBackendConfig, ScriptedBackend};
pub use pipeline::{resolve_instance, Instance, OutcomeStatus, PipelineConfig, PipelineOutcome};
pub use runner::{CommandRunner, SimulatedRunner, TestVerdict};

pub const DEFAULT_TRANSPORT_RETRIES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPolicy {
    pub first_temperature: f64,
    pub retry_temperature: f64,
    pub max_attempts: usize,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            first_temperature: 0.0,
            retry_temperature: 0.7,
            max_attempts: 5,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_attempts == 0 {
            return Err(ConfigError("max_attempts must be at least 1".into()));
        }
        if !(self.first_temperature >= 0.0 && self.retry_temperature >= 0.0) {
            return Err(ConfigError("temperatures must be non-negative".into()));
        }
        Ok(())
    }

    /// Temperature of the zero-based attempt `index`.
    pub fn temperature(&self, index: usize) -> f64 {
        if index == 0 {
            self.first_temperature
        } else {
            self.retry_temperature
        }
    }
}

/// Validation stage at which an output was rejected, in chain order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Parse,
    Validate,
    Locate,
    Apply,
    Syntax,
    Tests,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub stage: Stage,
    pub reason: String,
}

impl Rejection {
    pub fn new(stage: Stage, reason: impl Into<String>) -> Self {
        Rejection {
            stage,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum Verdict {
    Accepted { warnings: Vec<String> },
    Rejected(Rejection),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted { .. })
    }
}

/// One sampled output and what validation made of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub temperature: f64,
    pub raw: String,
    #[serde(flatten)]
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationError {
    Rejected(Rejection),
    /// The test runner itself broke; the output cannot be judged.
    Runner(RunnerError),
}

impl From<Rejection> for ValidationError {
    fn from(r: Rejection) -> Self {
        ValidationError::Rejected(r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validated<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StageFailure {
    #[error("no valid output after {0} attempts")]
    InvalidAfterRetries(usize),
    #[error("{0}")]
    Backend(BackendError),
    #[error("{0}")]
    Runner(RunnerError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRun<T> {
    pub attempts: Vec<Attempt>,
    pub result: Result<Validated<T>, StageFailure>,
}

/// Calls the backend, retrying transport failures up to `transport_retries`
/// extra times. Other backend errors are returned at once.
pub fn sample(
    backend: &dyn ModelBackend,
    task: &JsonTask,
    temperature: f64,
    transport_retries: usize,
    transcript: &mut Transcript,
) -> Result<String, BackendError> {
    let mut transport_failures = 0;
    loop {
        match generate(backend, task, temperature, transcript) {
            Err(BackendError::Transport(msg)) if transport_failures < transport_retries => {
                log::warn!("transport failure ({msg}), retrying");
                transport_failures += 1;
            }
            other => return other,
        }
    }
}

/// Samples until `validator` accepts an output or `policy.max_attempts`
/// outputs have been rejected. Attempt 1 runs at the first temperature and
/// every later one at the retry temperature.
pub fn run_with_resampling<T>(
    backend: &dyn ModelBackend,
    task: &JsonTask,
    policy: &SamplingPolicy,
    transport_retries: usize,
    transcript: &mut Transcript,
    mut validator: impl FnMut(&str) -> Result<Validated<T>, ValidationError>,
) -> Result<StageRun<T>, ConfigError> {
    policy.validate()?;
    let mut attempts = Vec::with_capacity(policy.max_attempts);
    for index in 0..policy.max_attempts {
        let temperature = policy.temperature(index);
        let raw = match sample(backend, task, temperature, transport_retries, transcript) {
            Ok(raw) => raw,
            Err(e) => {
                return Ok(StageRun {
                    attempts,
                    result: Err(StageFailure::Backend(e)),
                })
            }
        };
        match validator(&raw) {
            Ok(validated) => {
                attempts.push(Attempt {
                    temperature,
                    raw,
                    verdict: Verdict::Accepted {
                        warnings: validated.warnings.clone(),
                    },
                });
                return Ok(StageRun {
                    attempts,
                    result: Ok(validated),
                });
            }
            Err(ValidationError::Rejected(rejection)) => {
                log::debug!("attempt {} rejected: {}", index + 1, rejection.reason);
                attempts.push(Attempt {
                    temperature,
                    raw,
                    verdict: Verdict::Rejected(rejection),
                });
            }
            Err(ValidationError::Runner(e)) => {
                attempts.push(Attempt {
                    temperature,
                    raw,
                    verdict: Verdict::Rejected(Rejection::new(Stage::Tests, e.to_string())),
                });
                return Ok(StageRun {
                    attempts,
                    result: Err(StageFailure::Runner(e)),
                });
            }
        }
    }
    let n = attempts.len();
    Ok(StageRun {
        attempts,
        result: Err(StageFailure::InvalidAfterRetries(n)),
    })
}

/// Checks a parsed retrieval answer. Every file must exist; files the model
/// was not shown are accepted with a warning.
pub fn validate_retrieval(
    answer: &RetrievalAnswer,
    snapshot: &RepoSnapshot,
    candidates: &[String],
) -> Result<Vec<String>, Rejection> {
    if answer.files.is_empty() {
        return Err(Rejection::new(Stage::Validate, "no files selected"));
    }
    let mut warnings = Vec::new();
    for file in &answer.files {
        if !snapshot.contains(file) {
            return Err(Rejection::new(
                Stage::Validate,
                format!("{file} does not exist in the repository"),
            ));
        }
        if !candidates.contains(file) {
            warnings.push(format!("{file} was not among the retrieval candidates"));
        }
    }
    Ok(warnings)
}

/// An accepted edit with everything derived from it.
#[derive(Debug, Clone)]
pub struct EditArtifacts {
    pub edit: StructuredEdit,
    pub snapshot: RepoSnapshot,
    pub patch: UnifiedPatch,
    pub changed_files: Vec<String>,
}

/// Repository tests an edit must keep passing.
#[derive(Clone, Copy)]
pub struct TestGate<'a> {
    pub runner: &'a dyn TestRunner,
    pub tests: &'a [String],
}

/// Runs the editing validation chain: parse, locate, apply, syntax, and the
/// optional test gate. The first failing stage rejects the output.
pub fn validate_editing(
    raw: &str,
    snapshot: &RepoSnapshot,
    gate: Option<TestGate<'_>>,
) -> Result<Validated<EditArtifacts>, ValidationError> {
    let edit = parse_editing_output(raw).map_err(|e| Rejection::new(Stage::Parse, e.to_string()))?;
    let applied = apply_edits(snapshot, &edit).map_err(|e| match e {
        EditError::Locate { .. } => Rejection::new(Stage::Locate, e.to_string()),
        _ => Rejection::new(Stage::Apply, e.to_string()),
    })?;
    let patch = to_unified_patch(snapshot, &applied.snapshot);
    if patch.is_empty() {
        return Err(Rejection::new(Stage::Apply, "edit leaves every file unchanged").into());
    }
    let mut warnings = Vec::new();
    for path in &applied.changed_files {
        let file = applied.snapshot.get(path).expect("changed file exists");
        match check_file_syntax(file) {
            Ok(SyntaxCheck::Ok) => {}
            Ok(SyntaxCheck::SyntaxError(d)) => {
                return Err(Rejection::new(
                    Stage::Syntax,
                    format!("{path}:{}:{}: {}", d.line, d.column, d.message),
                )
                .into())
            }
            Err(_) => warnings.push(format!("syntax check skipped for {path}")),
        }
    }
    if let Some(gate) = gate.filter(|g| !g.tests.is_empty()) {
        let failed = failing_tests(gate.runner, &applied.snapshot, gate.tests)
            .map_err(ValidationError::Runner)?;
        if !failed.is_empty() {
            return Err(Rejection::new(Stage::Tests, format!("failing tests: {}", failed.join(", "))).into());
        }
    }
    Ok(Validated {
        value: EditArtifacts {
            edit,
            snapshot: applied.snapshot,
            patch,
            changed_files: applied.changed_files,
        },
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct P2PPolicy {
    pub enabled: bool,
    pub max_attempts: usize,
    /// Temperature of the first regeneration.
    pub first_regen_temperature: f64,
    /// Temperature of every later regeneration.
    pub regen_temperature: f64,
    /// Which test runner adapter executes P2P tests.
    pub runner: String,
}

impl Default for P2PPolicy {
    fn default() -> Self {
        P2PPolicy {
            enabled: false,
            max_attempts: 10,
            first_regen_temperature: 0.0,
            regen_temperature: 0.7,
            runner: "command".to_string(),
        }
    }
}

impl P2PPolicy {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_attempts == 0 {
            return Err(ConfigError("p2p max_attempts must be at least 1".into()));
        }
        if !(self.first_regen_temperature >= 0.0 && self.regen_temperature >= 0.0) {
            return Err(ConfigError("temperatures must be non-negative".into()));
        }
        Ok(())
    }

    /// Temperature for the one-based P2P attempt `n >= 2`.
    pub fn regen_temperature_for(&self, n: usize) -> f64 {
        if n <= 2 {
            self.first_regen_temperature
        } else {
            self.regen_temperature
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum P2PStatus {
    Retained,
    Rejected,
    Unevaluated,
    BackendFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2PAttempt {
    pub temperature: f64,
    /// The regenerated output; absent for the patch that entered the filter.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<Attempt>,
    pub failing_tests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2PRecord {
    pub status: P2PStatus,
    pub attempts: Vec<P2PAttempt>,
    pub error: Option<String>,
}

impl P2PRecord {
    /// Regenerated samples, i.e. model calls made by the filter.
    pub fn model_calls(&self) -> usize {
        self.attempts.iter().filter(|a| a.sample.is_some()).count()
    }
}

/// A fresh editing output for P2P regeneration.
pub enum Regeneration {
    Valid(Attempt, EditArtifacts),
    Invalid(Attempt),
}

/// Keeps a patch only if every P2P test passes on the patched snapshot;
/// otherwise asks `regenerate` for a new edit at the scheduled temperature
/// until `policy.max_attempts` patches have been tried. Returns the record
/// and the retained (or, for runner errors, last evaluated) edit.
pub fn p2p_filter(
    initial: EditArtifacts,
    initial_temperature: f64,
    p2p_tests: &[String],
    runner: &dyn TestRunner,
    policy: &P2PPolicy,
    regenerate: &mut dyn FnMut(f64) -> Result<Regeneration, BackendError>,
) -> Result<(P2PRecord, Option<EditArtifacts>), ConfigError> {
    policy.validate()?;
    let mut attempts = Vec::new();
    let mut current = Some(initial);
    let mut temperature = initial_temperature;
    let mut sample = None;
    for n in 1..=policy.max_attempts {
        if n > 1 {
            temperature = policy.regen_temperature_for(n);
            match regenerate(temperature) {
                Ok(Regeneration::Valid(attempt, artifacts)) => {
                    sample = Some(attempt);
                    current = Some(artifacts);
                }
                Ok(Regeneration::Invalid(attempt)) => {
                    attempts.push(P2PAttempt {
                        temperature,
                        sample: Some(attempt),
                        failing_tests: Vec::new(),
                    });
                    continue;
                }
                Err(e) => {
                    return Ok((
                        P2PRecord {
                            status: P2PStatus::BackendFailed,
                            attempts,
                            error: Some(e.to_string()),
                        },
                        None,
                    ))
                }
            }
        }
        let artifacts = current.take().expect("a candidate patch is present");
        match failing_tests(runner, &artifacts.snapshot, p2p_tests) {
            Ok(failed) => {
                let passed = failed.is_empty();
                attempts.push(P2PAttempt {
                    temperature,
                    sample: sample.take(),
                    failing_tests: failed,
                });
                if passed {
                    return Ok((
                        P2PRecord {
                            status: P2PStatus::Retained,
                            attempts,
                            error: None,
                        },
                        Some(artifacts),
                    ));
                }
            }
            Err(e) => {
                attempts.push(P2PAttempt {
                    temperature,
                    sample: sample.take(),
                    failing_tests: Vec::new(),
                });
                return Ok((
                    P2PRecord {
                        status: P2PStatus::Unevaluated,
                        attempts,
                        error: Some(e.to_string()),
                    },
                    Some(artifacts),
                ));
            }
        }
    }
    Ok((
        P2PRecord {
            status: P2PStatus::Rejected,
            attempts,
            error: None,
        },
        None,
    ))
}
