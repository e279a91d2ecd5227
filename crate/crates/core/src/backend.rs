//! Generation backends and the timeout/retry call wrapper.

use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::PromptRole;

pub const LLM_API_KEY_ENV: &str = "SCM_LLM_API_KEY";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend call timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend rate limited: {0}")]
    RateLimited(String),
    #[error("backend transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {message}")]
    Api { status: u16, message: String },
    #[error("backend rejected the request: {0}")]
    Rejected(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout(_) | BackendError::RateLimited(_) | BackendError::Transport(_) => true,
            BackendError::Api { status, .. } => *status >= 500,
            BackendError::Rejected(_) => false,
        }
    }
}

/// One prompt sent to a backend.
///
/// `inputs` are the named values the prompt was rendered from. Remote
/// backends only look at `prompt`; scripted ones may use both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub role: PromptRole,
    pub prompt: String,
    pub inputs: Vec<(String, String)>,
}

impl CompletionRequest {
    pub fn new(role: PromptRole, prompt: String, inputs: &[(&str, &str)]) -> Self {
        Self {
            role,
            prompt,
            inputs: inputs
                .iter()
                .map(|(k, v)| ((*k).to_string(), (*v).to_string()))
                .collect(),
        }
    }

    pub fn input(&self, name: &str) -> Option<&str> {
        self.inputs
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }
}

/// An instruction-following text generator.
pub trait GenerationBackend: Send + Sync {
    fn name(&self) -> &str;

    fn max_context_tokens(&self) -> usize;

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

pub type SharedBackend = Arc<dyn GenerationBackend>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CallPolicy {
    #[serde(with = "duration_ms")]
    pub timeout: Duration,
    pub max_retries: u32,
    #[serde(with = "duration_ms")]
    pub initial_backoff: Duration,
}

impl Default for CallPolicy {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            max_retries: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub retry_count: u32,
}

/// Run one backend call under a per-attempt timeout, retrying retryable
/// failures with exponential backoff.
pub fn complete_with_timeout(
    backend: &SharedBackend,
    request: &CompletionRequest,
    policy: &CallPolicy,
) -> Result<Completion, BackendError> {
    if policy.timeout.is_zero() {
        return Err(BackendError::Rejected("timeout must be positive".into()));
    }
    let mut backoff = policy.initial_backoff;
    let mut retry_count = 0;
    loop {
        match attempt(backend, request, policy.timeout) {
            Ok(text) => return Ok(Completion { text, retry_count }),
            Err(e) if e.is_retryable() && retry_count < policy.max_retries => {
                log::warn!(
                    "{} call to {} failed ({e}); retry {} of {}",
                    request.role,
                    backend.name(),
                    retry_count + 1,
                    policy.max_retries
                );
                std::thread::sleep(backoff);
                backoff *= 2;
                retry_count += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn attempt(
    backend: &SharedBackend,
    request: &CompletionRequest,
    timeout: Duration,
) -> Result<String, BackendError> {
    let (tx, rx) = mpsc::sync_channel(1);
    let backend = Arc::clone(backend);
    let request = request.clone();
    // A timed-out worker is detached; its late result is dropped.
    std::thread::spawn(move || {
        let _ = tx.send(backend.complete(&request));
    });
    match rx.recv_timeout(timeout) {
        Ok(result) => result,
        Err(mpsc::RecvTimeoutError::Timeout) => Err(BackendError::Timeout(timeout)),
        Err(mpsc::RecvTimeoutError::Disconnected) => {
            Err(BackendError::Transport("backend worker panicked".into()))
        }
    }
}

/// A canned-response rule. `role` and `pattern` both have to match when set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<PromptRole>,
    #[serde(default)]
    pub pattern: String,
    pub response: String,
}

/// Fixture file contents for [`ScriptedBackend`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub rules: Vec<ScriptRule>,
    pub default: String,
}

/// Offline backend answering from a fixture: the first rule whose role and
/// prompt substring match wins, otherwise the default response is used.
///
/// Responses may reference the request's inputs as `{{name}}`.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    script: Script,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self { script }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let script = serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self::new(script))
    }

    /// Built-in script so every command works without any configuration:
    /// always activates memory, accepts summaries, summarizes by passing the
    /// source through, and acknowledges the user in dialogue.
    pub fn offline_default() -> Self {
        let rule = |role, response: &str| ScriptRule {
            role: Some(role),
            pattern: String::new(),
            response: response.to_string(),
        };
        Self::new(Script {
            rules: vec![
                rule(PromptRole::ActivationDecision, "yes(A)"),
                rule(PromptRole::SummaryDecision, "yes(A)"),
                rule(PromptRole::TurnSummarization, "{{text}}"),
                rule(PromptRole::BlockSummarization, "{{block}}"),
                rule(PromptRole::MergeSummarization, "{{summaries}}"),
            ],
            default: "I understand. Please go on.".into(),
        })
    }

    pub fn script(&self) -> &Script {
        &self.script
    }
}

fn expand_inputs(template: &str, request: &CompletionRequest) -> String {
    if !template.contains("{{") {
        return template.to_string();
    }
    let mut out = String::new();
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                let name = after[..close].trim();
                match request.input(name) {
                    Some(v) => out.push_str(v),
                    None => out.push_str(&rest[open..open + close + 4]),
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

impl GenerationBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn max_context_tokens(&self) -> usize {
        usize::MAX
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let hit = self.script.rules.iter().find(|r| {
            r.role.is_none_or(|role| role == request.role) && request.prompt.contains(&r.pattern)
        });
        let response = hit.map_or(self.script.default.as_str(), |r| r.response.as_str());
        Ok(expand_inputs(response, request))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteBackendConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_context_tokens: usize,
    pub temperature: f64,
}

impl RemoteBackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var(LLM_API_KEY_ENV).ok(),
            max_context_tokens: 4096,
            temperature: 0.0,
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

/// Chat-completions style HTTP backend: POSTs a single user message to
/// `{base_url}/chat/completions`.
pub struct RemoteBackend {
    config: RemoteBackendConfig,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

impl GenerationBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn max_context_tokens(&self) -> usize {
        self.config.max_context_tokens
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: self.config.temperature,
        };
        let mut req = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(BackendError::RateLimited(resp.text().unwrap_or_default()));
        }
        if !status.is_success() {
            return Err(BackendError::Api {
                status: status.as_u16(),
                message: resp.text().unwrap_or_default(),
            });
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| BackendError::Transport(format!("malformed completion: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Transport("completion carried no content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn req(role: PromptRole, prompt: &str) -> CompletionRequest {
        CompletionRequest::new(role, prompt.to_string(), &[])
    }

    fn fast_policy() -> CallPolicy {
        CallPolicy {
            timeout: Duration::from_millis(200),
            max_retries: 3,
            initial_backoff: Duration::from_millis(1),
        }
    }

    #[test]
    fn scripted_first_match_wins() {
        let backend = ScriptedBackend::new(Script {
            rules: vec![
                ScriptRule { role: None, pattern: "sport".into(), response: "running".into() },
                ScriptRule { role: None, pattern: "sport".into(), response: "never".into() },
                ScriptRule {
                    role: Some(PromptRole::ActivationDecision),
                    pattern: String::new(),
                    response: "yes(A)".into(),
                },
            ],
            default: "fallback".into(),
        });
        assert_eq!(backend.complete(&req(PromptRole::DialogueFusion, "my sport?")).unwrap(), "running");
        assert_eq!(backend.complete(&req(PromptRole::ActivationDecision, "hello")).unwrap(), "yes(A)");
        assert_eq!(backend.complete(&req(PromptRole::DialogueFusion, "hello")).unwrap(), "fallback");
    }

    #[test]
    fn scripted_responses_expand_inputs() {
        let backend = ScriptedBackend::offline_default();
        let r = CompletionRequest::new(PromptRole::TurnSummarization, "p".into(), &[("text", "abc")]);
        assert_eq!(backend.complete(&r).unwrap(), "abc");
        assert_eq!(expand_inputs("{{missing}} x", &r), "{{missing}} x");
    }

    #[test]
    fn script_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        let script = ScriptedBackend::offline_default().script().clone();
        std::fs::write(&path, serde_json::to_string_pretty(&script).unwrap()).unwrap();
        assert_eq!(ScriptedBackend::from_file(&path).unwrap().script(), &script);
    }

    #[test]
    fn complete_returns_scripted_reply() {
        let backend: SharedBackend = Arc::new(ScriptedBackend::offline_default());
        let out = complete_with_timeout(&backend, &req(PromptRole::ActivationDecision, "x"), &fast_policy()).unwrap();
        assert_eq!(out, Completion { text: "yes(A)".into(), retry_count: 0 });
    }

    struct Sleeper(Duration);

    impl GenerationBackend for Sleeper {
        fn name(&self) -> &str {
            "sleeper"
        }
        fn max_context_tokens(&self) -> usize {
            1
        }
        fn complete(&self, _: &CompletionRequest) -> Result<String, BackendError> {
            std::thread::sleep(self.0);
            Ok("late".into())
        }
    }

    #[test]
    fn slow_backend_times_out() {
        let backend: SharedBackend = Arc::new(Sleeper(Duration::from_millis(500)));
        let policy = CallPolicy { timeout: Duration::from_millis(20), max_retries: 0, ..fast_policy() };
        let err = complete_with_timeout(&backend, &req(PromptRole::DialogueFusion, "x"), &policy).unwrap_err();
        assert_eq!(err, BackendError::Timeout(Duration::from_millis(20)));
    }

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
        error: BackendError,
    }

    impl GenerationBackend for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn max_context_tokens(&self) -> usize {
            1
        }
        fn complete(&self, _: &CompletionRequest) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(self.error.clone())
            } else {
                Ok("ok".into())
            }
        }
    }

    #[test]
    fn retries_count_in_completion() {
        let backend: SharedBackend = Arc::new(Flaky {
            failures: 2,
            calls: AtomicU32::new(0),
            error: BackendError::Transport("reset".into()),
        });
        let out = complete_with_timeout(&backend, &req(PromptRole::DialogueFusion, "x"), &fast_policy()).unwrap();
        assert_eq!(out.retry_count, 2);
        assert_eq!(out.text, "ok");
    }

    #[test]
    fn retries_are_bounded_and_skip_permanent_errors() {
        let backend: SharedBackend = Arc::new(Flaky {
            failures: 10,
            calls: AtomicU32::new(0),
            error: BackendError::RateLimited("slow down".into()),
        });
        let err = complete_with_timeout(&backend, &req(PromptRole::DialogueFusion, "x"), &fast_policy()).unwrap_err();
        assert!(matches!(err, BackendError::RateLimited(_)));

        let permanent = Arc::new(Flaky {
            failures: 10,
            calls: AtomicU32::new(0),
            error: BackendError::Api { status: 400, message: "bad".into() },
        });
        let shared: SharedBackend = permanent.clone();
        complete_with_timeout(&shared, &req(PromptRole::DialogueFusion, "x"), &fast_policy()).unwrap_err();
        assert_eq!(permanent.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn error_kinds_are_distinct() {
        assert!(BackendError::Timeout(Duration::from_secs(1)).is_retryable());
        assert!(BackendError::Api { status: 503, message: String::new() }.is_retryable());
        assert!(!BackendError::Api { status: 401, message: String::new() }.is_retryable());
        assert!(!BackendError::Rejected("no".into()).is_retryable());
    }
}
