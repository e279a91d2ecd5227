#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use scm_core::backend::{BackendError, CompletionRequest, Script, ScriptRule};
use scm_core::embedding::{EmbedError, Embedding};
use scm_core::{
    Engine, EmbeddingProvider, GenerationBackend, HashEmbedder, HeuristicTokenizer, PromptPack,
    PromptRole, ScriptedBackend,
};

/// Scripted backend that fails every call of one role and counts calls per
/// role.
pub struct FaultBackend {
    pub inner: ScriptedBackend,
    pub fail_role: Mutex<Option<PromptRole>>,
    pub calls: Mutex<HashMap<PromptRole, usize>>,
}

impl FaultBackend {
    pub fn new(inner: ScriptedBackend) -> Self {
        Self {
            inner,
            fail_role: Mutex::new(None),
            calls: Mutex::new(HashMap::new()),
        }
    }

    pub fn fail_on(&self, role: Option<PromptRole>) {
        *self.fail_role.lock().unwrap() = role;
    }

    pub fn count(&self, role: PromptRole) -> usize {
        self.calls.lock().unwrap().get(&role).copied().unwrap_or(0)
    }

    pub fn reset_counts(&self) {
        self.calls.lock().unwrap().clear();
    }
}

impl GenerationBackend for FaultBackend {
    fn name(&self) -> &str {
        "fault"
    }

    fn max_context_tokens(&self) -> usize {
        usize::MAX
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        *self.calls.lock().unwrap().entry(request.role).or_default() += 1;
        if *self.fail_role.lock().unwrap() == Some(request.role) {
            return Err(BackendError::Rejected(format!("injected {} failure", request.role)));
        }
        self.inner.complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedFault {
    None,
    /// Fail query embeddings (texts without a newline).
    Query,
    /// Fail interaction embeddings (summary pair joined by a newline).
    Interaction,
}

pub struct FaultEmbedder {
    pub inner: HashEmbedder,
    pub fault: Mutex<EmbedFault>,
}

impl FaultEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            inner: HashEmbedder::new(dim).unwrap(),
            fault: Mutex::new(EmbedFault::None),
        }
    }

    pub fn set(&self, fault: EmbedFault) {
        *self.fault.lock().unwrap() = fault;
    }
}

impl EmbeddingProvider for FaultEmbedder {
    fn name(&self) -> &str {
        "fault-hash"
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let fault = *self.fault.lock().unwrap();
        let interaction = text.contains('\n');
        if (fault == EmbedFault::Query && !interaction) || (fault == EmbedFault::Interaction && interaction) {
            return Err(EmbedError::Provider {
                message: "injected embedding failure".into(),
                retryable: false,
            });
        }
        self.inner.embed(text)
    }
}

pub fn engine_with(backend: Arc<dyn GenerationBackend>, embedder: Arc<dyn EmbeddingProvider>) -> Engine {
    Engine {
        backend,
        embedder,
        tokenizer: Arc::new(HeuristicTokenizer),
        prompts: Arc::new(PromptPack::english()),
    }
}

pub fn offline_engine() -> Engine {
    engine_with(
        Arc::new(ScriptedBackend::offline_default()),
        Arc::new(HashEmbedder::default()),
    )
}

/// Offline script whose dialogue replies depend on the observation, so that
/// long dialogues produce varied but deterministic memories.
pub fn echo_script() -> ScriptedBackend {
    let mut backend = ScriptedBackend::offline_default();
    let mut script: Script = backend.script().clone();
    script.rules.push(ScriptRule {
        role: Some(PromptRole::DialogueFusion),
        pattern: String::new(),
        response: "you said: {{observation}}".into(),
    });
    backend = ScriptedBackend::new(script);
    backend
}

/// Text of exactly `tokens` heuristic tokens (one ASCII run).
pub fn text_of_tokens(tokens: usize) -> String {
    "abcd".repeat(tokens)
}

pub const RUNNING_FIXTURE: [&str; 3] = [
    "My first sport was running and I ran every morning before school",
    "These days I mostly cook pasta and bake bread at home",
    "The weather this week has been grey with a little rain",
];

pub const RUNNING_PROBE: &str = "Do you remember my first sport?";
