//! Model backends: a chat-completions HTTP client and a scripted backend for
//! tests and offline runs.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::task::{estimate_tokens, JsonTask};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Network or server trouble; retried without consuming a sampling attempt.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("task needs {needed} tokens, backend accepts {max}")]
    BudgetExhausted { needed: usize, max: usize },
    /// The backend refused the request or is misconfigured; not retried.
    #[error("backend error: {0}")]
    Fatal(String),
}

pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;
    fn max_context_tokens(&self) -> usize;
    fn complete(&self, prompt: &str, temperature: f64) -> Result<String, BackendError>;
}

/// Short stable hash of a task's serialized input.
pub fn task_hash(serialized: &str) -> String {
    let digest = Sha256::digest(serialized.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub backend: String,
    pub task_hash: String,
    pub temperature: f64,
    pub latency_ms: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

/// Sends a task to the backend, returning its completion verbatim. Every
/// call, failed or not, is appended to the transcript.
pub fn generate(
    backend: &dyn ModelBackend,
    task: &JsonTask,
    temperature: f64,
    transcript: &mut Transcript,
) -> Result<String, BackendError> {
    let serialized = task.serialized();
    let needed = estimate_tokens(&serialized);
    if needed > backend.max_context_tokens() {
        return Err(BackendError::BudgetExhausted {
            needed,
            max: backend.max_context_tokens(),
        });
    }
    let started = Instant::now();
    let result = backend.complete(&serialized, temperature);
    transcript.entries.push(TranscriptEntry {
        backend: backend.name().to_string(),
        task_hash: task_hash(&serialized),
        temperature,
        latency_ms: started.elapsed().as_millis() as u64,
        error: result.as_ref().err().map(|e| e.to_string()),
    });
    result
}

/// One scripted reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Text(String),
    TransportError { transport_error: String },
}

/// Replies for prompts matching a rule. A rule matches when the prompt
/// contains `contains` (if set) and hashes to `task_hash` (if set).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub task_hash: Option<String>,
    pub replies: Vec<ScriptedReply>,
}

impl ScriptRule {
    fn matches(&self, prompt: &str, hash: &str) -> bool {
        self.contains.as_deref().is_none_or(|c| prompt.contains(c))
            && self.task_hash.as_deref().is_none_or(|h| h == hash)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default = "default_script_name")]
    pub name: String,
    #[serde(default = "default_script_context")]
    pub max_context_tokens: usize,
    pub rules: Vec<ScriptRule>,
}

fn default_script_name() -> String {
    "scripted".to_string()
}

fn default_script_context() -> usize {
    1 << 20
}

/// Deterministic backend driven by a script. The first matching rule
/// answers; for each distinct prompt it hands out its replies in order and
/// then keeps repeating the last one, so concurrent instances do not
/// disturb each other's sequences.
#[derive(Debug)]
pub struct ScriptedBackend {
    name: String,
    max_context_tokens: usize,
    rules: Vec<ScriptRule>,
    cursors: Mutex<HashMap<(usize, String), usize>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        ScriptedBackend {
            name: script.name,
            max_context_tokens: script.max_context_tokens,
            rules: script.rules,
            cursors: Mutex::new(HashMap::new()),
        }
    }

    /// Answers every prompt with `replies`, in order.
    pub fn sequence<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<ScriptedReply>,
    {
        Self::new(Script {
            name: default_script_name(),
            max_context_tokens: default_script_context(),
            rules: vec![ScriptRule {
                contains: None,
                task_hash: None,
                replies: replies.into_iter().map(Into::into).collect(),
            }],
        })
    }

    pub fn with_context_limit(mut self, tokens: usize) -> Self {
        self.max_context_tokens = tokens;
        self
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let script: Script = serde_json::from_str(text)
            .map_err(|e| BackendError::Fatal(format!("bad backend script: {e}")))?;
        Ok(Self::new(script))
    }

    /// Replies handed out so far across all rules.
    pub fn calls(&self) -> usize {
        self.cursors.lock().unwrap().values().sum()
    }
}

impl From<&str> for ScriptedReply {
    fn from(s: &str) -> Self {
        ScriptedReply::Text(s.to_string())
    }
}

impl From<String> for ScriptedReply {
    fn from(s: String) -> Self {
        ScriptedReply::Text(s)
    }
}

impl ModelBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn max_context_tokens(&self) -> usize {
        self.max_context_tokens
    }

    fn complete(&self, prompt: &str, _temperature: f64) -> Result<String, BackendError> {
        let hash = task_hash(prompt);
        let (idx, rule) = self
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.matches(prompt, &hash))
            .ok_or_else(|| BackendError::Fatal(format!("no scripted reply for task {hash}")))?;
        if rule.replies.is_empty() {
            return Err(BackendError::Fatal(format!("script rule {idx} has no replies")));
        }
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors.entry((idx, hash)).or_insert(0);
        let reply = &rule.replies[(*cursor).min(rule.replies.len() - 1)];
        *cursor += 1;
        match reply {
            ScriptedReply::Text(t) => Ok(t.clone()),
            ScriptedReply::TransportError { transport_error } => {
                Err(BackendError::Transport(transport_error.clone()))
            }
        }
    }
}

/// Connection settings for a chat-completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset means no auth.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_output_tokens: u32,
    pub max_context_tokens: usize,
    pub system_prompt: Option<String>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            endpoint: "http://localhost:8000/v1/chat/completions".to_string(),
            model: String::new(),
            api_key_env: None,
            timeout_secs: 600,
            max_output_tokens: 4096,
            max_context_tokens: 65_536,
            system_prompt: None,
        }
    }
}

/// Chat-completions client. The serialized task is sent as the single user
/// message; the reply is `choices[0].message.content`.
pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Fatal(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(HttpBackend {
            config,
            api_key,
            client,
        })
    }

    pub fn request_body(&self, prompt: &str, temperature: f64) -> serde_json::Value {
        let mut messages = Vec::new();
        if let Some(system) = &self.config.system_prompt {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": prompt}));
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": self.config.max_output_tokens,
        })
    }
}

impl ModelBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn max_context_tokens(&self) -> usize {
        self.config.max_context_tokens
    }

    fn complete(&self, prompt: &str, temperature: f64) -> Result<String, BackendError> {
        let mut request = self
            .client
            .post(&self.config.endpoint)
            .json(&self.request_body(prompt, temperature));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {body}")));
        }
        let body: serde_json::Value = response
            .json()
            .map_err(|e| BackendError::Transport(format!("unreadable response: {e}")))?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Fatal("response lacks choices[0].message.content".into()))
    }
}
