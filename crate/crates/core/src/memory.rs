//! The memory stream: an append-only log of interactions with
//! recency + relevance ranking and line-delimited JSON persistence.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, EmbedError, Embedding};
use crate::tokenizer::Tokenizer;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_RECENCY_DECAY: f64 = 0.995;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("embedding schema error: {0}")]
    Schema(#[from] EmbedError),
    #[error("embedding norm {norm} is not 1 (tolerance {NORM_TOLERANCE})")]
    NotUnitNorm { norm: f64 },
    #[error("current turn {current} precedes last access turn {last_accessed} of item {index}")]
    TurnOrder {
        index: usize,
        current: usize,
        last_accessed: usize,
    },
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error("memory log line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unsupported memory log version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("memory log I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// One interaction record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub index: usize,
    pub observation: String,
    pub response: String,
    pub observation_summary: String,
    pub response_summary: String,
    pub embedding: Embedding,
    pub created_turn: usize,
    pub last_accessed_turn: usize,
    pub token_count_full: usize,
    pub token_count_summary: usize,
}

impl MemoryItem {
    pub fn render_full(&self) -> String {
        render_turn(&self.observation, &self.response)
    }

    pub fn render_summary(&self) -> String {
        render_turn(&self.observation_summary, &self.response_summary)
    }
}

/// Textual form of one turn as it appears inside prompts.
pub fn render_turn(observation: &str, response: &str) -> String {
    format!("User: {observation}\nAssistant: {response}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceNormalization {
    /// `(cos + 1) / 2`
    #[default]
    ShiftedCosine,
    /// `max(cos, 0)`
    ClampedCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub recency_decay: f64,
    pub relevance_normalization: RelevanceNormalization,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            recency_decay: DEFAULT_RECENCY_DECAY,
            relevance_normalization: RelevanceNormalization::ShiftedCosine,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), MemoryError> {
        if !(3..=10).contains(&self.k) {
            return Err(MemoryError::Config(format!(
                "k must be within [3, 10], got {}",
                self.k
            )));
        }
        if !(self.recency_decay > 0.0 && self.recency_decay < 1.0) {
            return Err(MemoryError::Config(format!(
                "recency decay must be in (0, 1), got {}",
                self.recency_decay
            )));
        }
        Ok(())
    }
}

/// A memory item's scores for one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedMemory {
    pub item_index: usize,
    pub recency_score: f64,
    pub relevance_score: f64,
    pub rank_score: f64,
}

/// `decay ^ (current_turn - last_accessed_turn)`.
pub fn recency_score(
    item: &MemoryItem,
    current_turn: usize,
    config: &RetrievalConfig,
) -> Result<f64, MemoryError> {
    if current_turn < item.last_accessed_turn {
        return Err(MemoryError::TurnOrder {
            index: item.index,
            current: current_turn,
            last_accessed: item.last_accessed_turn,
        });
    }
    let gap = current_turn - item.last_accessed_turn;
    Ok(match i32::try_from(gap) {
        Ok(g) => config.recency_decay.powi(g),
        Err(_) => config.recency_decay.powf(gap as f64),
    })
}

pub fn relevance_score(
    item: &MemoryItem,
    query: &Embedding,
    config: &RetrievalConfig,
) -> Result<f64, MemoryError> {
    let cos = cosine(item.embedding.as_slice(), query.as_slice())?;
    Ok(match config.relevance_normalization {
        RelevanceNormalization::ShiftedCosine => (cos + 1.0) / 2.0,
        RelevanceNormalization::ClampedCosine => cos.max(0.0),
    })
}

/// Score every candidate and keep the best `k`, ordered by rank score
/// descending with ties going to the higher (more recent) index.
///
/// Pure: does not touch access bookkeeping and does not depend on the order
/// in which candidates are supplied.
pub fn score_candidates<'a>(
    candidates: impl IntoIterator<Item = &'a MemoryItem>,
    query: &Embedding,
    current_turn: usize,
    config: &RetrievalConfig,
    k: usize,
) -> Result<Vec<RankedMemory>, MemoryError> {
    let mut scored = Vec::new();
    for item in candidates {
        let recency_score = recency_score(item, current_turn, config)?;
        let relevance_score = relevance_score(item, query, config)?;
        scored.push(RankedMemory {
            item_index: item.index,
            recency_score,
            relevance_score,
            rank_score: recency_score + relevance_score,
        });
    }
    scored.sort_by(|a, b| {
        b.rank_score
            .total_cmp(&a.rank_score)
            .then(b.item_index.cmp(&a.item_index))
    });
    scored.truncate(k);
    Ok(scored)
}

/// Serializable header line of a memory log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub version: u32,
    pub embedding_dim: usize,
}

/// Fields needed to append one interaction.
#[derive(Debug, Clone)]
pub struct NewInteraction {
    pub observation: String,
    pub response: String,
    pub observation_summary: String,
    pub response_summary: String,
    pub embedding: Embedding,
}

/// Append-only ordered collection of memory items.
///
/// Single writer: mutation needs `&mut self`; readers share `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStream {
    dimension: usize,
    items: Vec<MemoryItem>,
    path: Option<PathBuf>,
}

impl MemoryStream {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            items: Vec::new(),
            path: None,
        }
    }

    /// Keep `path` in sync with every mutation from now on.
    pub fn attach(&mut self, path: impl Into<PathBuf>) -> Result<(), MemoryError> {
        let path = path.into();
        self.persist(&path)?;
        self.path = Some(path);
        Ok(())
    }

    pub fn attached_path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn get(&self, index: usize) -> Option<&MemoryItem> {
        self.items.get(index)
    }

    fn check_embedding(&self, embedding: &Embedding) -> Result<(), MemoryError> {
        if embedding.dim() != self.dimension {
            return Err(EmbedError::Dimension {
                expected: self.dimension,
                got: embedding.dim(),
            }
            .into());
        }
        if let Some(pos) = embedding.0.iter().position(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite(pos).into());
        }
        let norm = embedding.norm();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(MemoryError::NotUnitNorm { norm });
        }
        Ok(())
    }

    /// Append the next interaction; its index is the current stream length.
    ///
    /// Summaries whose rendering would cost more tokens than the full turn are
    /// cut back to their source length, and replaced by the source text if the
    /// rendering still does not fit.
    pub fn append(
        &mut self,
        new: NewInteraction,
        tokenizer: &dyn Tokenizer,
    ) -> Result<&MemoryItem, MemoryError> {
        self.check_embedding(&new.embedding)?;
        let index = self.items.len();
        let token_count_full = tokenizer.count(&render_turn(&new.observation, &new.response));

        let mut observation_summary = new.observation_summary;
        let mut response_summary = new.response_summary;
        let mut summary_tokens =
            tokenizer.count(&render_turn(&observation_summary, &response_summary));
        if summary_tokens > token_count_full {
            observation_summary = tokenizer
                .truncate(&observation_summary, tokenizer.count(&new.observation))
                .to_string();
            response_summary = tokenizer
                .truncate(&response_summary, tokenizer.count(&new.response))
                .to_string();
            summary_tokens = tokenizer.count(&render_turn(&observation_summary, &response_summary));
            if summary_tokens > token_count_full {
                observation_summary = new.observation.clone();
                response_summary = new.response.clone();
                summary_tokens = token_count_full;
            }
        }

        self.items.push(MemoryItem {
            index,
            observation: new.observation,
            response: new.response,
            observation_summary,
            response_summary,
            embedding: new.embedding,
            created_turn: index,
            last_accessed_turn: index,
            token_count_full,
            token_count_summary: summary_tokens,
        });
        if let Err(e) = self.sync() {
            self.items.pop();
            return Err(e);
        }
        Ok(&self.items[index])
    }

    /// Drop the most recent item. Used to roll back an aborted turn.
    pub(crate) fn pop_last(&mut self) -> Option<MemoryItem> {
        let item = self.items.pop();
        if item.is_some() {
            if let Err(e) = self.sync() {
                log::error!("failed to sync memory log after rollback: {e}");
            }
        }
        item
    }

    /// Rank without mutating access bookkeeping.
    pub fn rank(
        &self,
        query: &Embedding,
        current_turn: usize,
        config: &RetrievalConfig,
        exclude: &HashSet<usize>,
    ) -> Result<Vec<RankedMemory>, MemoryError> {
        self.rank_top(query, current_turn, config, exclude, config.k)
    }

    pub(crate) fn rank_top(
        &self,
        query: &Embedding,
        current_turn: usize,
        config: &RetrievalConfig,
        exclude: &HashSet<usize>,
        k: usize,
    ) -> Result<Vec<RankedMemory>, MemoryError> {
        if query.dim() != self.dimension {
            return Err(EmbedError::Dimension {
                expected: self.dimension,
                got: query.dim(),
            }
            .into());
        }
        score_candidates(
            self.items.iter().filter(|m| !exclude.contains(&m.index)),
            query,
            current_turn,
            config,
            k,
        )
    }

    /// Set `last_accessed_turn` of the given items to `turn` and return the
    /// previous values for rollback.
    pub fn mark_accessed(
        &mut self,
        indices: &[usize],
        turn: usize,
    ) -> Result<Vec<(usize, usize)>, MemoryError> {
        let mut previous = Vec::with_capacity(indices.len());
        for &i in indices {
            if let Some(item) = self.items.get_mut(i) {
                previous.push((i, item.last_accessed_turn));
                item.last_accessed_turn = item.last_accessed_turn.max(turn);
            }
        }
        if let Err(e) = self.sync() {
            for &(i, turn) in &previous {
                self.items[i].last_accessed_turn = turn;
            }
            return Err(e);
        }
        Ok(previous)
    }

    /// Undo [`mark_accessed`](Self::mark_accessed).
    pub(crate) fn restore_access(&mut self, previous: &[(usize, usize)]) {
        for &(i, turn) in previous {
            if let Some(item) = self.items.get_mut(i) {
                item.last_accessed_turn = turn;
            }
        }
        if let Err(e) = self.sync() {
            log::error!("failed to sync memory log after rollback: {e}");
        }
    }

    /// Rank, then record an access on each returned item. Scores are
    /// computed against the pre-update access turns.
    pub fn rank_memories(
        &mut self,
        query: &Embedding,
        current_turn: usize,
        config: &RetrievalConfig,
        exclude: &HashSet<usize>,
    ) -> Result<Vec<RankedMemory>, MemoryError> {
        let ranked = self.rank(query, current_turn, config, exclude)?;
        let indices: Vec<usize> = ranked.iter().map(|r| r.item_index).collect();
        self.mark_accessed(&indices, current_turn)?;
        Ok(ranked)
    }

    /// The interaction of turn `current_turn - 1`, if it is in the stream.
    pub fn flash_memory(&self, current_turn: usize) -> Option<&MemoryItem> {
        let prev = current_turn.checked_sub(1)?;
        self.items.iter().find(|m| m.index == prev)
    }

    fn sync(&self) -> Result<(), MemoryError> {
        match &self.path {
            Some(p) => self.persist(p),
            None => Ok(()),
        }
    }

    /// Write the whole stream to `path` atomically (temp file + rename).
    pub fn persist(&self, path: &Path) -> Result<(), MemoryError> {
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut out = BufWriter::new(fs::File::create(&tmp)?);
            let header = LogHeader {
                version: FORMAT_VERSION,
                embedding_dim: self.dimension,
            };
            serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            for item in &self.items {
                serde_json::to_writer(&mut out, item).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
            out.get_ref().sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parse the line-delimited log format. Line numbers in errors are 1-based.
    pub fn parse(text: &str) -> Result<Self, MemoryError> {
        let mut lines = text.split_inclusive('\n').enumerate();
        let (_, first) = lines.next().ok_or(MemoryError::Malformed {
            line: 1,
            message: "missing header".into(),
        })?;
        let header_value: serde_json::Value =
            serde_json::from_str(first.trim_end()).map_err(|e| MemoryError::Malformed {
                line: 1,
                message: e.to_string(),
            })?;
        let version = header_value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or(MemoryError::Malformed {
                line: 1,
                message: "header lacks a version".into(),
            })?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(MemoryError::Version {
                found: version as u32,
            });
        }
        let header: LogHeader =
            serde_json::from_value(header_value).map_err(|e| MemoryError::Malformed {
                line: 1,
                message: e.to_string(),
            })?;

        let mut stream = MemoryStream::new(header.embedding_dim);
        for (i, raw) in lines {
            let line = i + 1;
            let malformed = |message: String| MemoryError::Malformed { line, message };
            if !raw.ends_with('\n') {
                return Err(malformed("truncated record (no line terminator)".into()));
            }
            let body = raw.trim_end();
            if body.is_empty() {
                continue;
            }
            let item: MemoryItem =
                serde_json::from_str(body).map_err(|e| malformed(e.to_string()))?;
            if item.index != stream.items.len() {
                return Err(malformed(format!(
                    "expected index {}, found {}",
                    stream.items.len(),
                    item.index
                )));
            }
            if item.created_turn != item.index || item.last_accessed_turn < item.created_turn {
                return Err(malformed("inconsistent turn bookkeeping".into()));
            }
            stream
                .check_embedding(&item.embedding)
                .map_err(|e| malformed(e.to_string()))?;
            stream.items.push(item);
        }
        Ok(stream)
    }
}
