//! The memory controller.
//!
//! Two self-asked questions drive it: whether the current input needs any
//! memory at all, and, for long recalled memories, whether the memory's
//! summary is enough. Retrieved memories are then laid out under a token
//! budget and fused with the observation into the generation prompt.

use serde::{Deserialize, Serialize};

use crate::backend::{complete_with_timeout, BackendError, CallPolicy, CompletionRequest, SharedBackend};
use crate::memory::{MemoryItem, MemoryStream, RankedMemory};
use crate::prompts::{PromptError, PromptPack, PromptRole};
use crate::tokenizer::Tokenizer;

pub const RELATED_MEMORY_HEADER: &str = "RELATED MEMORY:";
pub const RECENT_CONTEXT_HEADER: &str = "RECENT CONTEXT:";
pub const CURRENT_INPUT_HEADER: &str = "CURRENT INPUT:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub summary_trigger_item_tokens: usize,
    pub summary_trigger_total_tokens: usize,
    pub context_budget_tokens: usize,
    pub activation_default_on_parse_failure: bool,
    pub summary_default_on_parse_failure: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            summary_trigger_item_tokens: 800,
            summary_trigger_total_tokens: 2000,
            context_budget_tokens: 2500,
            activation_default_on_parse_failure: true,
            summary_default_on_parse_failure: false,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.summary_trigger_item_tokens == 0
            || self.summary_trigger_total_tokens == 0
            || self.context_budget_tokens == 0
        {
            return Err("controller token thresholds must be positive".into());
        }
        if self.summary_trigger_item_tokens >= self.summary_trigger_total_tokens
            || self.summary_trigger_total_tokens > self.context_budget_tokens
        {
            log::warn!(
                "unusual controller thresholds: item {} / total {} / budget {}",
                self.summary_trigger_item_tokens,
                self.summary_trigger_total_tokens,
                self.context_budget_tokens
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    ActivateMemory,
    UseSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerDecision {
    pub question: DecisionKind,
    /// Memory the question was asked about (summary decisions only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_index: Option<usize>,
    pub raw_model_output: String,
    pub verdict: bool,
    pub fallback_used: bool,
}

/// Every backend interaction made while serving a turn, verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCall {
    pub role: PromptRole,
    pub prompt: String,
    pub raw_output: String,
    pub retry_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rendering {
    Full,
    Summary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedMemory {
    pub item_index: usize,
    pub rendering: Rendering,
    pub text: String,
    pub token_count: usize,
}

impl RenderedMemory {
    pub fn of(item: &MemoryItem, rendering: Rendering, tokenizer: &dyn Tokenizer) -> Self {
        let text = match rendering {
            Rendering::Full => item.render_full(),
            Rendering::Summary => item.render_summary(),
        };
        Self {
            item_index: item.index,
            rendering,
            token_count: tokenizer.count(&text),
            text,
        }
    }
}

/// Parse an A/B verdict: case-insensitive, first of `(a)` / `(b)` / leading
/// `yes` / leading `no` wins. `None` when nothing matches.
pub fn parse_verdict(raw: &str) -> Option<bool> {
    let lower = raw.to_lowercase();
    let trimmed = lower.trim_start();
    let offset = lower.len() - trimmed.len();
    let leading_word = |word: &str| {
        trimmed.starts_with(word)
            && !trimmed[word.len()..]
                .chars()
                .next()
                .is_some_and(char::is_alphanumeric)
    };
    let mut candidates: Vec<(usize, bool)> = Vec::new();
    if let Some(p) = lower.find("(a)") {
        candidates.push((p, true));
    }
    if let Some(p) = lower.find("(b)") {
        candidates.push((p, false));
    }
    if leading_word("yes") {
        candidates.push((offset, true));
    }
    if leading_word("no") {
        candidates.push((offset, false));
    }
    candidates.into_iter().min_by_key(|c| c.0).map(|c| c.1)
}

/// Backend access for controller questions, recording each call.
pub struct Controller<'a> {
    pub backend: &'a SharedBackend,
    pub prompts: &'a PromptPack,
    pub config: &'a ControllerConfig,
    pub tokenizer: &'a dyn Tokenizer,
    pub policy: &'a CallPolicy,
}

/// Outcome of laying retrieved memories out under the token budget.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Reorganized {
    pub rendered: Vec<RenderedMemory>,
    pub summary_decisions: Vec<ControllerDecision>,
    pub dropped: Vec<usize>,
    /// The top memory alone exceeded the budget and was cut mid-text.
    pub degraded: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ControllerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("ranked memory {0} is not in the stream")]
    UnknownMemory(usize),
}

impl Controller<'_> {
    fn ask(
        &self,
        role: PromptRole,
        inputs: &[(&str, &str)],
        calls: &mut Vec<BackendCall>,
    ) -> Result<String, ControllerError> {
        let prompt = self.prompts.render(role, inputs)?;
        let request = CompletionRequest::new(role, prompt, inputs);
        let out = complete_with_timeout(self.backend, &request, self.policy)?;
        calls.push(BackendCall {
            role,
            prompt: request.prompt,
            raw_output: out.text.clone(),
            retry_count: out.retry_count,
        });
        Ok(out.text)
    }

    fn decide(
        &self,
        question: DecisionKind,
        item_index: Option<usize>,
        raw: String,
        default: bool,
    ) -> ControllerDecision {
        let parsed = parse_verdict(&raw);
        ControllerDecision {
            question,
            item_index,
            verdict: parsed.unwrap_or(default),
            fallback_used: parsed.is_none(),
            raw_model_output: raw,
        }
    }

    pub fn should_activate_memory(
        &self,
        observation: &str,
        calls: &mut Vec<BackendCall>,
    ) -> Result<ControllerDecision, ControllerError> {
        let raw = self.ask(
            PromptRole::ActivationDecision,
            &[("observation", observation)],
            calls,
        )?;
        Ok(self.decide(
            DecisionKind::ActivateMemory,
            None,
            raw,
            self.config.activation_default_on_parse_failure,
        ))
    }

    pub fn should_use_summary(
        &self,
        observation: &str,
        item: &MemoryItem,
        calls: &mut Vec<BackendCall>,
    ) -> Result<ControllerDecision, ControllerError> {
        let summary = item.render_summary();
        let raw = self.ask(
            PromptRole::SummaryDecision,
            &[("observation", observation), ("memory_summary", &summary)],
            calls,
        )?;
        Ok(self.decide(
            DecisionKind::UseSummary,
            Some(item.index),
            raw,
            self.config.summary_default_on_parse_failure,
        ))
    }

    /// Render retrieved memories as full text or summary and fit them into
    /// the context budget.
    ///
    /// Summary questions are asked only when the full renderings together
    /// exceed the total trigger, and only for items above the per-item
    /// trigger. If the result is still over budget, memories whose decision
    /// fell back switch to their summary, then the lowest-ranked memories are
    /// dropped whole.
    pub fn reorganize_memories(
        &self,
        ranked: &[RankedMemory],
        stream: &MemoryStream,
        observation: &str,
        calls: &mut Vec<BackendCall>,
    ) -> Result<Reorganized, ControllerError> {
        let items = ranked
            .iter()
            .map(|r| {
                stream
                    .get(r.item_index)
                    .ok_or(ControllerError::UnknownMemory(r.item_index))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = Reorganized {
            rendered: items
                .iter()
                .map(|m| RenderedMemory::of(m, Rendering::Full, self.tokenizer))
                .collect(),
            ..Default::default()
        };
        let total = |r: &[RenderedMemory]| r.iter().map(|m| m.token_count).sum::<usize>();

        let mut fallback_slots = Vec::new();
        if total(&out.rendered) > self.config.summary_trigger_total_tokens {
            for (slot, item) in items.iter().enumerate() {
                if out.rendered[slot].token_count <= self.config.summary_trigger_item_tokens {
                    continue;
                }
                let decision = self.should_use_summary(observation, item, calls)?;
                if decision.verdict {
                    out.rendered[slot] = RenderedMemory::of(item, Rendering::Summary, self.tokenizer);
                } else if decision.fallback_used {
                    fallback_slots.push(slot);
                }
                out.summary_decisions.push(decision);
            }
        }

        let budget = self.config.context_budget_tokens;
        for slot in fallback_slots {
            if total(&out.rendered) <= budget {
                break;
            }
            out.rendered[slot] = RenderedMemory::of(items[slot], Rendering::Summary, self.tokenizer);
        }
        while total(&out.rendered) > budget && out.rendered.len() > 1 {
            let dropped = out.rendered.pop().expect("nonempty");
            out.dropped.push(dropped.item_index);
        }
        if total(&out.rendered) > budget {
            let top = items[0];
            let summary = top.render_summary();
            let text = self.tokenizer.truncate(&summary, budget).to_string();
            out.rendered[0] = RenderedMemory {
                item_index: top.index,
                rendering: Rendering::Summary,
                token_count: self.tokenizer.count(&text),
                text,
            };
            out.degraded = true;
        }
        Ok(out)
    }
}

/// Memory section of the fusion prompt. Empty slots are left out together
/// with their headers.
pub fn fusion_context(
    activation: &[RenderedMemory],
    flash: Option<&RenderedMemory>,
    observation: &str,
) -> String {
    let mut sections = Vec::new();
    if !activation.is_empty() {
        let body: Vec<String> = activation
            .iter()
            .map(|m| format!("Turn {}: {}", m.item_index, m.text))
            .collect();
        sections.push(format!("{RELATED_MEMORY_HEADER}\n{}", body.join("\n")));
    }
    if let Some(m) = flash {
        sections.push(format!(
            "{RECENT_CONTEXT_HEADER}\nTurn {}: {}",
            m.item_index, m.text
        ));
    }
    sections.push(format!("{CURRENT_INPUT_HEADER}\n{observation}"));
    sections.join("\n\n")
}

pub fn fuse_input(
    activation: &[RenderedMemory],
    flash: Option<&RenderedMemory>,
    observation: &str,
    prompts: &PromptPack,
) -> Result<String, PromptError> {
    let context = fusion_context(activation, flash, observation);
    prompts.render(PromptRole::DialogueFusion, &[("context", &context)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Script, ScriptRule, ScriptedBackend};
    use crate::embedding::Embedding;
    use crate::memory::NewInteraction;
    use crate::tokenizer::HeuristicTokenizer;
    use std::sync::Arc;
    use std::time::Duration;

    fn scripted(reply: &str) -> SharedBackend {
        Arc::new(ScriptedBackend::new(Script {
            rules: vec![],
            default: reply.to_string(),
        }))
    }

    fn policy() -> CallPolicy {
        CallPolicy {
            timeout: Duration::from_secs(5),
            max_retries: 0,
            initial_backoff: Duration::ZERO,
        }
    }

    fn with_controller<R>(backend: &SharedBackend, f: impl FnOnce(&Controller<'_>) -> R) -> R {
        let prompts = PromptPack::english();
        let config = ControllerConfig::default();
        let policy = policy();
        let c = Controller {
            backend,
            prompts: &prompts,
            config: &config,
            tokenizer: &HeuristicTokenizer,
            policy: &policy,
        };
        f(&c)
    }

    /// Stream whose items render to exactly the requested token counts.
    fn stream_with_sizes(sizes: &[usize]) -> MemoryStream {
        let mut s = MemoryStream::new(8);
        for (i, &tokens) in sizes.iter().enumerate() {
            // "User: " + obs + "\nAssistant: " + resp; pad obs to hit the count
            let fixed = "User: \nAssistant: r".len();
            let target_bytes = tokens * 4;
            let obs = "o".repeat(target_bytes - fixed);
            s.append(
                NewInteraction {
                    observation: obs,
                    response: "r".into(),
                    observation_summary: format!("summary {i}"),
                    response_summary: "r".into(),
                    embedding: Embedding::basis(8, i % 8),
                },
                &HeuristicTokenizer,
            )
            .unwrap();
            assert_eq!(s.get(i).unwrap().token_count_full, tokens);
        }
        s
    }

    fn ranked_all(s: &MemoryStream) -> Vec<RankedMemory> {
        s.items()
            .iter()
            .map(|m| RankedMemory {
                item_index: m.index,
                recency_score: 1.0,
                relevance_score: 0.5,
                rank_score: 1.5,
            })
            .collect()
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("yes(A)"), Some(true));
        assert_eq!(parse_verdict("(B) No need."), Some(false));
        assert_eq!(parse_verdict("no(B)"), Some(false));
        assert_eq!(parse_verdict("  YES, definitely"), Some(true));
        assert_eq!(parse_verdict("I pick (b), not (a)"), Some(false));
        assert_eq!(parse_verdict("maybe"), None);
        assert_eq!(parse_verdict("nothing to add"), None);
        assert_eq!(parse_verdict(""), None);
    }

    #[test]
    fn activation_decisions() {
        for (reply, verdict, fallback) in [
            ("yes(A)", true, false),
            ("(B) No need.", false, false),
            ("maybe", true, true),
        ] {
            let backend = scripted(reply);
            let mut calls = Vec::new();
            let d = with_controller(&backend, |c| c.should_activate_memory("hi", &mut calls)).unwrap();
            assert_eq!((d.verdict, d.fallback_used), (verdict, fallback), "{reply}");
            assert_eq!(d.raw_model_output, reply);
            assert_eq!(calls.len(), 1);
            assert_eq!(calls[0].raw_output, reply);
        }
    }

    #[test]
    fn summary_decisions() {
        let s = stream_with_sizes(&[900]);
        for (reply, verdict, fallback) in [
            ("yes(A)", true, false),
            ("no(B)", false, false),
            ("#%&!", false, true),
        ] {
            let backend = scripted(reply);
            let mut calls = Vec::new();
            let d = with_controller(&backend, |c| {
                c.should_use_summary("q", s.get(0).unwrap(), &mut calls)
            })
            .unwrap();
            assert_eq!((d.verdict, d.fallback_used), (verdict, fallback), "{reply}");
            assert_eq!(d.item_index, Some(0));
        }
    }

    #[test]
    fn small_memories_skip_summary_questions() {
        let s = stream_with_sizes(&[300, 300]);
        let backend = scripted("yes(A)");
        let mut calls = Vec::new();
        let out = with_controller(&backend, |c| {
            c.reorganize_memories(&ranked_all(&s), &s, "q", &mut calls)
        })
        .unwrap();
        assert!(calls.is_empty());
        assert!(out.rendered.iter().all(|r| r.rendering == Rendering::Full));
        assert_eq!(out.rendered.iter().map(|r| r.token_count).sum::<usize>(), 600);
    }

    #[test]
    fn large_memories_switch_to_summary_when_approved() {
        let s = stream_with_sizes(&[1500, 900]);
        let backend = scripted("yes(A)");
        let mut calls = Vec::new();
        let out = with_controller(&backend, |c| {
            c.reorganize_memories(&ranked_all(&s), &s, "q", &mut calls)
        })
        .unwrap();
        assert_eq!(calls.len(), 2);
        assert!(out.rendered.iter().all(|r| r.rendering == Rendering::Summary));
        assert_eq!(out.summary_decisions.len(), 2);
    }

    #[test]
    fn over_budget_drops_lowest_rank_whole() {
        // Five memories of 600 tokens = 3000 > 2500. Summaries refused, so
        // full renderings stay and the tail is dropped.
        let s = stream_with_sizes(&[600, 600, 600, 600, 600]);
        let backend = scripted("no(B)");
        let mut calls = Vec::new();
        let out = with_controller(&backend, |c| {
            c.reorganize_memories(&ranked_all(&s), &s, "q", &mut calls)
        })
        .unwrap();
        // greedy-drop oracle over the rank-ordered token list
        let mut sizes = vec![600usize; 5];
        let mut dropped = Vec::new();
        while sizes.iter().sum::<usize>() > 2500 {
            sizes.pop();
            dropped.push(sizes.len());
        }
        assert_eq!(out.rendered.len(), sizes.len());
        assert_eq!(out.dropped, dropped);
        assert_eq!(
            out.rendered.iter().map(|r| r.item_index).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert!(!out.degraded);
    }

    #[test]
    fn fallback_decisions_yield_to_summary_under_budget_pressure() {
        let s = stream_with_sizes(&[1500, 1500]);
        let backend = scripted("unclear");
        let mut calls = Vec::new();
        let out = with_controller(&backend, |c| {
            c.reorganize_memories(&ranked_all(&s), &s, "q", &mut calls)
        })
        .unwrap();
        assert!(out.summary_decisions.iter().all(|d| d.fallback_used && !d.verdict));
        assert_eq!(out.rendered[0].rendering, Rendering::Summary);
        assert_eq!(out.rendered[1].rendering, Rendering::Full);
        assert!(out.rendered.iter().map(|r| r.token_count).sum::<usize>() <= 2500);
    }

    #[test]
    fn single_oversized_memory_degrades_to_truncated_summary() {
        let mut s = MemoryStream::new(8);
        let long = "word ".repeat(3000);
        s.append(
            NewInteraction {
                observation: long.clone(),
                response: long.clone(),
                observation_summary: long.clone(),
                response_summary: long,
                embedding: Embedding::basis(8, 0),
            },
            &HeuristicTokenizer,
        )
        .unwrap();
        let backend = scripted("yes(A)");
        let mut calls = Vec::new();
        let out = with_controller(&backend, |c| {
            c.reorganize_memories(&ranked_all(&s), &s, "q", &mut calls)
        })
        .unwrap();
        assert!(out.degraded);
        assert_eq!(out.rendered.len(), 1);
        assert!(out.rendered[0].token_count <= 2500);
    }

    #[test]
    fn fusion_layout() {
        let pack = PromptPack::english();
        let bare = fuse_input(&[], None, "hi", &pack).unwrap();
        assert!(bare.contains("CURRENT INPUT:\nhi"));
        assert!(!bare.contains(RELATED_MEMORY_HEADER));
        assert!(!bare.contains(RECENT_CONTEXT_HEADER));

        let mem = RenderedMemory {
            item_index: 2,
            rendering: Rendering::Full,
            text: "User: a\nAssistant: b".into(),
            token_count: 5,
        };
        let flash = RenderedMemory { item_index: 7, ..mem.clone() };
        let both = fuse_input(std::slice::from_ref(&mem), Some(&flash), "hi", &pack).unwrap();
        let a = both.find(RELATED_MEMORY_HEADER).unwrap();
        let f = both.find(RECENT_CONTEXT_HEADER).unwrap();
        let c = both.find(CURRENT_INPUT_HEADER).unwrap();
        assert!(a < f && f < c);
        assert!(both.contains("Turn 2: User: a"));
        assert!(both.contains("Turn 7: User: a"));
        assert_eq!(both, fuse_input(&[mem], Some(&flash), "hi", &pack).unwrap());
    }

    #[test]
    fn scripted_role_rules_reach_the_controller() {
        let backend: SharedBackend = Arc::new(ScriptedBackend::new(Script {
            rules: vec![ScriptRule {
                role: Some(PromptRole::ActivationDecision),
                pattern: "joke".into(),
                response: "no(B)".into(),
            }],
            default: "yes(A)".into(),
        }));
        assert_eq!(backend.name(), "scripted");
        let mut calls = Vec::new();
        let joke = with_controller(&backend, |c| c.should_activate_memory("Tell me a joke", &mut calls)).unwrap();
        assert!(!joke.verdict);
    }
}
