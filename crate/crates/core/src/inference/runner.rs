//! Test-runner adapters. A runner executes one test identifier against a
//! snapshot and reports pass or fail; anything else is a runner error.

use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repo::RepoSnapshot;

pub const TEST_PLACEHOLDER: &str = "{test}";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("test runner {runner} failed on {test}: {message}")]
pub struct RunnerError {
    pub runner: String,
    pub test: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestVerdict {
    Pass,
    Fail,
}

pub trait TestRunner: Send + Sync {
    fn id(&self) -> &str;
    fn run(&self, snapshot: &RepoSnapshot, test: &str) -> Result<TestVerdict, RunnerError>;
}

/// Runs `tests` in order and returns the ids that failed.
pub fn failing_tests(
    runner: &dyn TestRunner,
    snapshot: &RepoSnapshot,
    tests: &[String],
) -> Result<Vec<String>, RunnerError> {
    let mut failed = Vec::new();
    for test in tests {
        if runner.run(snapshot, test)? == TestVerdict::Fail {
            failed.push(test.clone());
        }
    }
    Ok(failed)
}

/// External command runner. The snapshot is written to a fresh temporary
/// directory, which becomes the working directory of `argv` with every
/// `{test}` replaced by the test id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandRunner {
    pub argv: Vec<String>,
    #[serde(default = "default_pass_codes")]
    pub pass_codes: Vec<i32>,
    #[serde(default = "default_fail_codes")]
    pub fail_codes: Vec<i32>,
}

fn default_pass_codes() -> Vec<i32> {
    vec![0]
}

fn default_fail_codes() -> Vec<i32> {
    vec![1]
}

impl CommandRunner {
    pub fn new<I, S>(argv: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CommandRunner {
            argv: argv.into_iter().map(Into::into).collect(),
            pass_codes: default_pass_codes(),
            fail_codes: default_fail_codes(),
        }
    }
}

impl TestRunner for CommandRunner {
    fn id(&self) -> &str {
        "command"
    }

    fn run(&self, snapshot: &RepoSnapshot, test: &str) -> Result<TestVerdict, RunnerError> {
        let err = |message: String| RunnerError {
            runner: self.id().to_string(),
            test: test.to_string(),
            message,
        };
        let (program, args) = self
            .argv
            .split_first()
            .ok_or_else(|| err("empty command".into()))?;
        let dir = tempfile::tempdir().map_err(|e| err(e.to_string()))?;
        snapshot
            .materialize(dir.path())
            .map_err(|e| err(e.to_string()))?;
        let output = Command::new(program.replace(TEST_PLACEHOLDER, test))
            .args(args.iter().map(|a| a.replace(TEST_PLACEHOLDER, test)))
            .current_dir(dir.path())
            .output()
            .map_err(|e| err(format!("cannot start {program}: {e}")))?;
        match output.status.code() {
            Some(c) if self.pass_codes.contains(&c) => Ok(TestVerdict::Pass),
            Some(c) if self.fail_codes.contains(&c) => Ok(TestVerdict::Fail),
            Some(c) => Err(err(format!("unexpected exit code {c}"))),
            None => Err(err("terminated by signal".into())),
        }
    }
}

type RunFn = dyn Fn(&RepoSnapshot, &str) -> Result<TestVerdict, String> + Send + Sync;

/// In-process runner backed by a closure.
pub struct SimulatedRunner {
    run: Box<RunFn>,
}

impl SimulatedRunner {
    pub fn new<F>(run: F) -> Self
    where
        F: Fn(&RepoSnapshot, &str) -> Result<TestVerdict, String> + Send + Sync + 'static,
    {
        SimulatedRunner { run: Box::new(run) }
    }
}

impl TestRunner for SimulatedRunner {
    fn id(&self) -> &str {
        "simulated"
    }

    fn run(&self, snapshot: &RepoSnapshot, test: &str) -> Result<TestVerdict, RunnerError> {
        (self.run)(snapshot, test).map_err(|message| RunnerError {
            runner: self.id().to_string(),
            test: test.to_string(),
            message,
        })
    }
}
