//! Self-controlled memory for instruction-following text generators.
//!
//! A [`Session`](agent::Session) keeps every interaction in a
//! [`MemoryStream`](memory::MemoryStream). Each turn the
//! [`controller`] decides whether memory is needed, the stream ranks items by
//! recency plus relevance, long memories are swapped for their summaries
//! under a token budget, and the result is fused with the new observation
//! before generation. The same memory mechanism drives hierarchical
//! summarization of very long documents in [`summarizer`].

pub mod agent;
pub mod backend;
pub mod controller;
pub mod embedding;
pub mod evalharness;
pub mod memory;
pub mod prompts;
pub mod store;
pub mod summarizer;
pub mod tokenizer;

pub use agent::{Ablation, Engine, EngineConfig, Session, TurnError, TurnTrace};
pub use backend::{CallPolicy, GenerationBackend, ScriptedBackend, SharedBackend};
pub use controller::{ControllerConfig, ControllerDecision, RenderedMemory};
pub use embedding::{EmbeddingProvider, HashEmbedder, SharedEmbedder};
pub use memory::{MemoryItem, MemoryStream, RankedMemory, RetrievalConfig};
pub use prompts::{PromptPack, PromptRole};
pub use tokenizer::{HeuristicTokenizer, SharedTokenizer, Tokenizer};
