//! One workflow iteration per observation: accept input, decide on memory
//! activation, retrieve, reorganize, fuse, generate, then summarize the turn
//! and write it back to the memory stream.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{complete_with_timeout, BackendError, CallPolicy, CompletionRequest, SharedBackend};
use crate::controller::{
    fuse_input, BackendCall, Controller, ControllerConfig, ControllerDecision, ControllerError,
    Reorganized, RenderedMemory, Rendering,
};
use crate::embedding::{embed_interaction, EmbedError, SharedEmbedder};
use crate::memory::{MemoryError, MemoryStream, NewInteraction, RankedMemory, RetrievalConfig};
use crate::prompts::{PromptError, PromptPack, PromptRole};
use crate::tokenizer::{SharedTokenizer, Tokenizer};

pub const DEFAULT_SUMMARY_PASSTHROUGH_TOKENS: usize = 200;

/// Engine variants with one component removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// No decisions; retrieved memories are concatenated in full and the
    /// history is cut at the context budget.
    NoController,
    NoFlash,
    NoActivation,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoController,
        Ablation::NoFlash,
        Ablation::NoActivation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoController => "no_controller",
            Ablation::NoFlash => "no_flash",
            Ablation::NoActivation => "no_activation",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub retrieval: RetrievalConfig,
    pub controller: ControllerConfig,
    pub ablation: Ablation,
    pub flash_rendering: Rendering,
    pub summary_passthrough_tokens: usize,
    pub call_policy: CallPolicy,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            controller: ControllerConfig::default(),
            ablation: Ablation::None,
            flash_rendering: Rendering::Full,
            summary_passthrough_tokens: DEFAULT_SUMMARY_PASSTHROUGH_TOKENS,
            call_policy: CallPolicy::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), TurnError> {
        self.retrieval.validate()?;
        self.controller.validate().map_err(TurnError::Config)?;
        Ok(())
    }
}

/// The pluggable parts shared by every session.
#[derive(Clone)]
pub struct Engine {
    pub backend: SharedBackend,
    pub embedder: SharedEmbedder,
    pub tokenizer: SharedTokenizer,
    pub prompts: Arc<PromptPack>,
}

#[derive(Debug, Error)]
pub enum TurnError {
    #[error("observation is empty")]
    EmptyObservation,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("recording trace: {0}")]
    Trace(String),
}

impl From<ControllerError> for TurnError {
    fn from(e: ControllerError) -> Self {
        match e {
            ControllerError::Backend(e) => TurnError::Backend(e),
            ControllerError::Prompt(e) => TurnError::Prompt(e),
            ControllerError::UnknownMemory(i) => {
                TurnError::Config(format!("ranked memory {i} missing from stream"))
            }
        }
    }
}

impl TurnError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TurnError::Backend(e) => e.is_retryable(),
            TurnError::Embedding(e) => e.is_retryable(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSummaries {
    pub observation_summary: String,
    pub response_summary: String,
    /// A summary came back longer than its source and was cut.
    pub truncated: bool,
}

/// Full audit record of one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub turn: usize,
    pub ablation: Ablation,
    /// `None` when the decision was bypassed by an ablation.
    pub activation_decision: Option<ControllerDecision>,
    pub activated: bool,
    pub retrieved: Vec<RankedMemory>,
    pub rendered: Vec<RenderedMemory>,
    pub dropped: Vec<usize>,
    pub budget_degraded: bool,
    pub history_truncated: bool,
    pub summary_decisions: Vec<ControllerDecision>,
    pub flash_used: bool,
    pub flash: Option<RenderedMemory>,
    pub fused_prompt: String,
    pub response: String,
    pub turn_summaries: TurnSummaries,
    pub backend_calls: Vec<BackendCall>,
}

/// Condense each side of a turn. Texts within the passthrough limit are kept
/// verbatim without a backend call; summaries longer than their source are
/// cut to the source's token count.
#[allow(clippy::too_many_arguments)]
pub fn summarize_turn(
    observation: &str,
    response: &str,
    backend: &SharedBackend,
    prompts: &PromptPack,
    tokenizer: &dyn Tokenizer,
    passthrough_tokens: usize,
    policy: &CallPolicy,
    calls: &mut Vec<BackendCall>,
) -> Result<TurnSummaries, TurnError> {
    let mut truncated = false;
    let mut one = |speaker: &str, text: &str| -> Result<String, TurnError> {
        let source_tokens = tokenizer.count(text);
        if source_tokens <= passthrough_tokens {
            return Ok(text.to_string());
        }
        let inputs = [("speaker", speaker), ("text", text)];
        let prompt = prompts.render(PromptRole::TurnSummarization, &inputs)?;
        let request = CompletionRequest::new(PromptRole::TurnSummarization, prompt, &inputs);
        let out = complete_with_timeout(backend, &request, policy)?;
        calls.push(BackendCall {
            role: PromptRole::TurnSummarization,
            prompt: request.prompt,
            raw_output: out.text.clone(),
            retry_count: out.retry_count,
        });
        if tokenizer.count(&out.text) > source_tokens {
            truncated = true;
            return Ok(tokenizer.truncate(&out.text, source_tokens).to_string());
        }
        Ok(out.text)
    };
    let observation_summary = one("user", observation)?;
    let response_summary = one("assistant", response)?;
    Ok(TurnSummaries {
        observation_summary,
        response_summary,
        truncated,
    })
}

/// A dialogue with its own memory stream. One turn runs at a time
/// (`run_turn` takes `&mut self`).
#[derive(Debug, Clone)]
pub struct Session {
    pub session_id: String,
    pub config: EngineConfig,
    pub prompt_pack: String,
    stream: MemoryStream,
    traces: Vec<TurnTrace>,
    trace_log: Option<PathBuf>,
}

impl Session {
    pub fn new(
        session_id: impl Into<String>,
        config: EngineConfig,
        engine: &Engine,
    ) -> Result<Self, TurnError> {
        config.validate()?;
        Ok(Self {
            session_id: session_id.into(),
            config,
            prompt_pack: engine.prompts.id().to_string(),
            stream: MemoryStream::new(engine.embedder.dimension()),
            traces: Vec::new(),
            trace_log: None,
        })
    }

    /// Reassemble a session from persisted parts.
    pub fn restore(
        session_id: impl Into<String>,
        config: EngineConfig,
        prompt_pack: impl Into<String>,
        stream: MemoryStream,
        traces: Vec<TurnTrace>,
    ) -> Self {
        Self {
            session_id: session_id.into(),
            config,
            prompt_pack: prompt_pack.into(),
            stream,
            traces,
            trace_log: None,
        }
    }

    /// Append every future trace to `path` as one JSON line.
    pub fn log_traces_to(&mut self, path: impl Into<PathBuf>) {
        self.trace_log = Some(path.into());
    }

    pub fn current_turn(&self) -> usize {
        self.stream.len()
    }

    pub fn stream(&self) -> &MemoryStream {
        &self.stream
    }

    pub fn stream_mut(&mut self) -> &mut MemoryStream {
        &mut self.stream
    }

    pub fn traces(&self) -> &[TurnTrace] {
        &self.traces
    }

    pub fn trace(&self, turn: usize) -> Option<&TurnTrace> {
        self.traces.iter().find(|t| t.turn == turn)
    }

    /// Run one full iteration. On any error the stream, its access
    /// bookkeeping and the turn counter are left as they were.
    pub fn run_turn(&mut self, engine: &Engine, observation: &str) -> Result<(String, TurnTrace), TurnError> {
        // 1. input acquisition
        if observation.trim().is_empty() {
            return Err(TurnError::EmptyObservation);
        }
        if engine.embedder.dimension() != self.stream.dimension() {
            return Err(EmbedError::Dimension {
                expected: self.stream.dimension(),
                got: engine.embedder.dimension(),
            }
            .into());
        }
        let turn = self.current_turn();
        let cfg = self.config;
        let tokenizer = engine.tokenizer.as_ref();
        let mut calls = Vec::new();
        let controller = Controller {
            backend: &engine.backend,
            prompts: &engine.prompts,
            config: &cfg.controller,
            tokenizer,
            policy: &cfg.call_policy,
        };
        let flash_enabled = cfg.ablation != Ablation::NoFlash;

        // 2. memory activation
        let (activation_decision, activated) = match cfg.ablation {
            Ablation::NoActivation => (None, false),
            Ablation::NoController => (None, true),
            Ablation::None | Ablation::NoFlash => {
                let d = controller.should_activate_memory(observation, &mut calls)?;
                let v = d.verdict;
                (Some(d), v)
            }
        };

        // 3. memory retrieval
        let mut exclude = HashSet::new();
        if flash_enabled {
            if let Some(prev) = turn.checked_sub(1) {
                exclude.insert(prev);
            }
        }
        let retrieved = if activated && self.stream.len() > exclude.len() {
            let query = engine.embedder.embed(observation)?;
            self.stream.rank(&query, turn, &cfg.retrieval, &exclude)?
        } else {
            Vec::new()
        };

        // 4. memory reorganization
        let mut history_truncated = false;
        let reorganized = if cfg.ablation == Ablation::NoController {
            let (rendered, cut) = concat_and_truncate(&retrieved, &self.stream, &cfg.controller, tokenizer);
            history_truncated = cut;
            Reorganized { rendered, ..Default::default() }
        } else {
            controller.reorganize_memories(&retrieved, &self.stream, observation, &mut calls)?
        };

        // 5. input fusion
        let flash = if flash_enabled {
            self.stream
                .flash_memory(turn)
                .map(|m| RenderedMemory::of(m, cfg.flash_rendering, tokenizer))
        } else {
            None
        };
        let fused_prompt = fuse_input(&reorganized.rendered, flash.as_ref(), observation, &engine.prompts)?;

        // 6. response generation
        let request = CompletionRequest::new(
            PromptRole::DialogueFusion,
            fused_prompt.clone(),
            &[
                ("context", &crate::controller::fusion_context(&reorganized.rendered, flash.as_ref(), observation)),
                ("observation", observation),
            ],
        );
        let completion = complete_with_timeout(&engine.backend, &request, &cfg.call_policy)?;
        calls.push(BackendCall {
            role: PromptRole::DialogueFusion,
            prompt: fused_prompt.clone(),
            raw_output: completion.text.clone(),
            retry_count: completion.retry_count,
        });
        let response = completion.text;

        // write-back
        let summaries = summarize_turn(
            observation,
            &response,
            &engine.backend,
            &engine.prompts,
            tokenizer,
            cfg.summary_passthrough_tokens,
            &cfg.call_policy,
            &mut calls,
        )?;
        let embedding = embed_interaction(
            engine.embedder.as_ref(),
            &summaries.observation_summary,
            &summaries.response_summary,
        )?;

        let trace = TurnTrace {
            turn,
            ablation: cfg.ablation,
            activation_decision,
            activated,
            retrieved,
            rendered: reorganized.rendered,
            dropped: reorganized.dropped,
            budget_degraded: reorganized.degraded,
            history_truncated,
            summary_decisions: reorganized.summary_decisions,
            flash_used: flash.is_some(),
            flash,
            fused_prompt,
            response: response.clone(),
            turn_summaries: summaries.clone(),
            backend_calls: calls,
        };
        self.commit(&trace, summaries, embedding, observation, &response, tokenizer)?;
        Ok((response, trace))
    }

    fn commit(
        &mut self,
        trace: &TurnTrace,
        summaries: TurnSummaries,
        embedding: crate::embedding::Embedding,
        observation: &str,
        response: &str,
        tokenizer: &dyn Tokenizer,
    ) -> Result<(), TurnError> {
        let accessed: Vec<usize> = trace.retrieved.iter().map(|r| r.item_index).collect();
        let previous = self.stream.mark_accessed(&accessed, trace.turn)?;
        let appended = self.stream.append(
            NewInteraction {
                observation: observation.to_string(),
                response: response.to_string(),
                observation_summary: summaries.observation_summary,
                response_summary: summaries.response_summary,
                embedding,
            },
            tokenizer,
        );
        if let Err(e) = appended {
            self.stream.restore_access(&previous);
            return Err(e.into());
        }
        if let Some(path) = &self.trace_log {
            if let Err(e) = append_json_line(path, trace) {
                self.stream.pop_last();
                self.stream.restore_access(&previous);
                return Err(TurnError::Trace(e.to_string()));
            }
        }
        self.traces.push(trace.clone());
        Ok(())
    }
}

/// Render every retrieved memory in full, join them, and cut the history at
/// the context budget. The memory straddling the limit is cut mid-text.
fn concat_and_truncate(
    ranked: &[RankedMemory],
    stream: &MemoryStream,
    config: &ControllerConfig,
    tokenizer: &dyn Tokenizer,
) -> (Vec<RenderedMemory>, bool) {
    let mut out = Vec::new();
    let mut used = 0usize;
    let budget = config.context_budget_tokens;
    for r in ranked {
        let Some(item) = stream.get(r.item_index) else { continue };
        let full = RenderedMemory::of(item, Rendering::Full, tokenizer);
        if used + full.token_count <= budget {
            used += full.token_count;
            out.push(full);
            continue;
        }
        let room = budget - used;
        if room > 0 {
            let text = tokenizer.truncate(&full.text, room).to_string();
            if !text.is_empty() {
                out.push(RenderedMemory {
                    item_index: item.index,
                    rendering: Rendering::Full,
                    token_count: tokenizer.count(&text),
                    text,
                });
            }
        }
        return (out, true);
    }
    (out, false)
}

fn append_json_line<T: Serialize>(path: &std::path::Path, value: &T) -> std::io::Result<()> {
    let mut line = serde_json::to_string(value).map_err(std::io::Error::from)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.sync_data()
}
