//! Iterative and hierarchical summarization of documents far longer than any
//! context window.
//!
//! The document is cut into blocks that fit the block budget. Blocks are
//! summarized strictly in order; each block's prompt carries the most
//! relevant summaries of earlier blocks, retrieved from a memory stream that
//! grows by one item per block. Level-1 summaries are then merged in
//! consecutive groups of `merge_fanout` until a single root remains.
//!
//! Completed nodes can be checkpointed to a directory; a rerun against the
//! same directory skips finished work and, with a deterministic backend,
//! produces the same tree as an uninterrupted run.

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Engine;
use crate::backend::{complete_with_timeout, BackendError, CallPolicy, CompletionRequest};
use crate::embedding::{embed_interaction, fnv1a64, EmbedError};
use crate::memory::{MemoryError, MemoryStream, NewInteraction, RetrievalConfig};
use crate::prompts::{PromptError, PromptRole};
use crate::tokenizer::Tokenizer;

const CHECKPOINT_FILE: &str = "nodes.jsonl";

#[derive(Debug, Error)]
pub enum SummarizeError {
    #[error("document is empty")]
    EmptyDocument,
    #[error("invalid summarizer config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("summarizer I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummarizeConfig {
    pub block_token_budget: usize,
    pub merge_fanout: usize,
    pub memory_k: usize,
    /// Leading tokens of a block used as its retrieval query and memory key.
    pub head_tokens: usize,
}

impl Default for SummarizeConfig {
    fn default() -> Self {
        Self {
            block_token_budget: 2500,
            merge_fanout: 4,
            memory_k: 3,
            head_tokens: 200,
        }
    }
}

impl SummarizeConfig {
    pub fn validate(&self) -> Result<(), SummarizeError> {
        if self.block_token_budget == 0 {
            return Err(SummarizeError::Config("block budget must be positive".into()));
        }
        if self.merge_fanout < 2 {
            return Err(SummarizeError::Config("merge fanout must be at least 2".into()));
        }
        if self.head_tokens == 0 {
            return Err(SummarizeError::Config("head length must be positive".into()));
        }
        Ok(())
    }
}

/// A contiguous slice of the source document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: usize,
    pub text: String,
    pub byte_start: usize,
    pub byte_end: usize,
    pub token_count: usize,
}

fn is_speaker_line(line: &str) -> bool {
    let Some((name, _)) = line.split_once(':') else {
        return false;
    };
    let name = name.trim_end();
    !name.is_empty()
        && name.len() <= 40
        && name.chars().next().is_some_and(char::is_uppercase)
        && name
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, ' ' | '.' | '_' | '\'' | '-'))
}

/// Transcript-style text: most nonblank lines start with `NAME:`.
pub fn looks_like_transcript(text: &str) -> bool {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() < 2 {
        return false;
    }
    let tagged = lines.iter().filter(|l| is_speaker_line(l)).count();
    tagged * 5 >= lines.len() * 3
}

/// Paragraphs: each unit keeps the blank lines that follow it.
fn paragraph_units(text: &str) -> Vec<&str> {
    let mut units = Vec::new();
    let mut start = 0;
    let mut pos = 0;
    let mut seen_blank = false;
    for line in text.split_inclusive('\n') {
        let blank = line.trim().is_empty();
        if !blank && seen_blank && pos > start {
            units.push(&text[start..pos]);
            start = pos;
        }
        seen_blank = blank;
        pos += line.len();
    }
    if start < text.len() {
        units.push(&text[start..]);
    }
    units
}

/// Speaker turns: a new unit starts at every `NAME:` line.
fn speaker_units(text: &str) -> Vec<&str> {
    let mut units = Vec::new();
    let mut start = 0;
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        if is_speaker_line(line) && pos > start {
            units.push(&text[start..pos]);
            start = pos;
        }
        pos += line.len();
    }
    if start < text.len() {
        units.push(&text[start..]);
    }
    units
}

/// Sentences end after `.`, `!` or `?` and keep their trailing whitespace.
fn sentence_units(text: &str) -> Vec<&str> {
    let mut units = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if !matches!(c, '.' | '!' | '?' | '。' | '！' | '？') {
            continue;
        }
        let mut end = None;
        while let Some(&(j, n)) = chars.peek() {
            if n.is_whitespace() {
                chars.next();
                end = Some(j + n.len_utf8());
            } else {
                break;
            }
        }
        let end = match end {
            Some(e) => e,
            None if chars.peek().is_none() => text.len(),
            None => continue,
        };
        units.push(&text[start..end]);
        start = end;
    }
    if start < text.len() {
        units.push(&text[start..]);
    }
    units
}

fn hard_units<'a>(text: &'a str, budget: usize, tokenizer: &dyn Tokenizer) -> Vec<&'a str> {
    let mut units = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let mut piece = tokenizer.truncate(rest, budget);
        if piece.is_empty() {
            let first = rest.chars().next().map_or(rest.len(), char::len_utf8);
            piece = &rest[..first];
        }
        units.push(piece);
        rest = &rest[piece.len()..];
    }
    units
}

/// Greedy split into blocks of at most `budget` tokens, preferring paragraph
/// (or speaker-turn) boundaries, then sentences, then hard token cuts.
/// Concatenating the blocks gives back `text` exactly.
pub fn chunk_document(text: &str, budget: usize, tokenizer: &dyn Tokenizer) -> Vec<Block> {
    assert!(budget > 0, "block budget must be positive");
    let units = if looks_like_transcript(text) {
        speaker_units(text)
    } else {
        paragraph_units(text)
    };
    let mut pieces = Vec::new();
    for unit in units {
        if tokenizer.count(unit) <= budget {
            pieces.push(unit);
            continue;
        }
        for sentence in sentence_units(unit) {
            if tokenizer.count(sentence) <= budget {
                pieces.push(sentence);
            } else {
                pieces.extend(hard_units(sentence, budget, tokenizer));
            }
        }
    }

    let mut blocks = Vec::new();
    let mut start = 0;
    let mut end = 0;
    let flush = |start: usize, end: usize, blocks: &mut Vec<Block>| {
        let slice = &text[start..end];
        blocks.push(Block {
            index: blocks.len(),
            text: slice.to_string(),
            byte_start: start,
            byte_end: end,
            token_count: tokenizer.count(slice),
        });
    };
    for piece in pieces {
        let piece_end = end + piece.len();
        if end > start && tokenizer.count(&text[start..piece_end]) > budget {
            flush(start, end, &mut blocks);
            start = end;
        }
        end = piece_end;
    }
    if end > start {
        flush(start, end, &mut blocks);
    }
    blocks
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryNode {
    pub node_id: String,
    pub level: usize,
    pub children: Vec<String>,
    /// Token span in the document (level 1 only); spans tile the document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byte_span: Option<(usize, usize)>,
    pub text: String,
    pub token_count: usize,
}

/// What went into producing one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub node_id: String,
    /// `None` for pass-through nodes that needed no backend call.
    pub prompt: Option<String>,
    /// Memory indices (= earlier block indices) fused into a block prompt.
    pub retrieved: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryTree {
    pub nodes: Vec<SummaryNode>,
    /// Node ids per level, level 1 first.
    pub levels: Vec<Vec<String>>,
}

impl SummaryTree {
    pub fn node(&self, id: &str) -> Option<&SummaryNode> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    pub fn root(&self) -> &SummaryNode {
        let id = &self.levels.last().expect("tree has levels")[0];
        self.node(id).expect("root present")
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    /// Level-1 nodes reached by an in-order walk from the root.
    pub fn leaves_in_order(&self) -> Vec<&SummaryNode> {
        let index: HashMap<&str, &SummaryNode> =
            self.nodes.iter().map(|n| (n.node_id.as_str(), n)).collect();
        let mut out = Vec::new();
        let mut stack = vec![self.root()];
        while let Some(n) = stack.pop() {
            if n.level == 1 {
                out.push(n);
            } else {
                for c in n.children.iter().rev() {
                    stack.push(index[c.as_str()]);
                }
            }
        }
        out
    }

    /// Check the structural invariants against the source document.
    pub fn validate(&self, document: &str) -> Result<(), String> {
        let top = self.levels.last().ok_or("tree has no levels")?;
        if top.len() != 1 {
            return Err(format!("top level has {} nodes", top.len()));
        }
        let mut byte = 0;
        let mut tok = 0;
        let leaves = self.leaves_in_order();
        if leaves.len() != self.levels[0].len() {
            return Err("some level-1 nodes are unreachable from the root".into());
        }
        for leaf in leaves {
            let (bs, be) = leaf.byte_span.ok_or("leaf without byte span")?;
            let (ts, te) = leaf.source_span.ok_or("leaf without token span")?;
            if bs != byte || ts != tok {
                return Err(format!("leaf {} is not contiguous", leaf.node_id));
            }
            byte = be;
            tok = te;
        }
        if byte != document.len() {
            return Err("leaves do not cover the document".into());
        }
        for (depth, level) in self.levels.iter().enumerate().skip(1) {
            let last = level.len() - 1;
            for (i, id) in level.iter().enumerate() {
                let n = self.node(id).ok_or("dangling node id")?;
                if n.level != depth + 1 {
                    return Err(format!("node {id} has wrong level"));
                }
                if n.children.len() < 2 && i != last {
                    return Err(format!("node {id} merges fewer than two children"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryRun {
    pub tree: SummaryTree,
    pub traces: Vec<NodeTrace>,
    /// Nodes reused from a checkpoint instead of recomputed.
    pub resumed_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CheckpointHeader {
    document_hash: String,
    blocks: usize,
    config: SummarizeConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointRecord {
    node: SummaryNode,
    trace: NodeTrace,
}

struct Checkpoint {
    path: PathBuf,
    done: HashMap<String, CheckpointRecord>,
    lock: Mutex<()>,
}

impl Checkpoint {
    fn open(dir: &Path, header: &CheckpointHeader) -> Result<Self, SummarizeError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(CHECKPOINT_FILE);
        let mut done = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            let mut lines = text.split_inclusive('\n');
            let first = lines.next().unwrap_or_default();
            let found: CheckpointHeader = serde_json::from_str(first.trim_end())
                .map_err(|e| SummarizeError::Checkpoint(format!("bad header: {e}")))?;
            if &found != header {
                return Err(SummarizeError::Checkpoint(
                    "checkpoint belongs to a different document or configuration".into(),
                ));
            }
            for (i, line) in lines.enumerate() {
                if !line.ends_with('\n') {
                    // interrupted mid-write; the node is simply redone
                    log::warn!("dropping unterminated checkpoint line {}", i + 2);
                    break;
                }
                let rec: CheckpointRecord = serde_json::from_str(line.trim_end())
                    .map_err(|e| SummarizeError::Checkpoint(format!("line {}: {e}", i + 2)))?;
                done.insert(rec.node.node_id.clone(), rec);
            }
            // rewrite without any partial tail so appends stay line-aligned
            let mut clean = serde_json::to_string(header).map_err(std::io::Error::from)?;
            clean.push('\n');
            let mut recs: Vec<&CheckpointRecord> = done.values().collect();
            recs.sort_by(|a, b| (a.node.level, &a.node.node_id).cmp(&(b.node.level, &b.node.node_id)));
            for rec in recs {
                clean.push_str(&serde_json::to_string(rec).map_err(std::io::Error::from)?);
                clean.push('\n');
            }
            fs::write(&path, clean)?;
        } else {
            let mut line = serde_json::to_string(header).map_err(std::io::Error::from)?;
            line.push('\n');
            fs::write(&path, line)?;
        }
        Ok(Self {
            path,
            done,
            lock: Mutex::new(()),
        })
    }

    fn record(&self, node: &SummaryNode, trace: &NodeTrace) -> Result<(), SummarizeError> {
        let rec = CheckpointRecord {
            node: node.clone(),
            trace: trace.clone(),
        };
        let mut line = serde_json::to_string(&rec).map_err(std::io::Error::from)?;
        line.push('\n');
        let _guard = self.lock.lock().unwrap();
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }
}

pub fn node_id(level: usize, position: usize) -> String {
    format!("L{level}-{position}")
}

/// Summarization pipeline over the engine's backend, embedder and tokenizer.
pub struct Summarizer<'a> {
    pub engine: &'a Engine,
    pub config: SummarizeConfig,
    pub policy: CallPolicy,
}

impl Summarizer<'_> {
    fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig::default()
    }

    fn head<'t>(&self, block: &'t str) -> &'t str {
        self.engine.tokenizer.truncate(block, self.config.head_tokens)
    }

    fn call(&self, role: PromptRole, inputs: &[(&str, &str)]) -> Result<(String, String), SummarizeError> {
        let prompt = self.engine.prompts.render(role, inputs)?;
        let request = CompletionRequest::new(role, prompt, inputs);
        let out = complete_with_timeout(&self.engine.backend, &request, &self.policy)?;
        Ok((request.prompt, out.text))
    }

    /// Retrieve memories for `block` and record the access, returning the
    /// retrieved memory indices.
    fn recall(&self, block: &Block, stream: &mut MemoryStream) -> Result<Vec<usize>, SummarizeError> {
        if self.config.memory_k == 0 || stream.is_empty() {
            return Ok(Vec::new());
        }
        let query = self.engine.embedder.embed(self.head(&block.text))?;
        let turn = stream.len();
        let ranked = stream.rank_top(&query, turn, &self.retrieval_config(), &HashSet::new(), self.config.memory_k)?;
        let indices: Vec<usize> = ranked.iter().map(|r| r.item_index).collect();
        stream.mark_accessed(&indices, turn)?;
        Ok(indices)
    }

    fn remember(&self, block: &Block, summary: &str, stream: &mut MemoryStream) -> Result<(), SummarizeError> {
        let head = self.head(&block.text);
        let embedding = embed_interaction(self.engine.embedder.as_ref(), head, summary)?;
        stream.append(
            NewInteraction {
                observation: head.to_string(),
                response: summary.to_string(),
                observation_summary: head.to_string(),
                response_summary: summary.to_string(),
                embedding,
            },
            self.engine.tokenizer.as_ref(),
        )?;
        Ok(())
    }

    fn leaf(&self, block: &Block, token_start: usize, text: String) -> SummaryNode {
        SummaryNode {
            node_id: node_id(1, block.index),
            level: 1,
            children: Vec::new(),
            source_span: Some((token_start, token_start + block.token_count)),
            byte_span: Some((block.byte_start, block.byte_end)),
            token_count: self.engine.tokenizer.count(&text),
            text,
        }
    }

    /// Summarize one block with memories of earlier blocks, then store the
    /// summary as a new memory item.
    pub fn summarize_block(
        &self,
        block: &Block,
        token_start: usize,
        stream: &mut MemoryStream,
    ) -> Result<(SummaryNode, NodeTrace), SummarizeError> {
        let retrieved = self.recall(block, stream)?;
        let memories = if retrieved.is_empty() {
            "(none)".to_string()
        } else {
            retrieved
                .iter()
                .map(|&i| format!("Section {}: {}", i, stream.items()[i].response))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let (prompt, summary) = self.call(
            PromptRole::BlockSummarization,
            &[("memories", &memories), ("block", &block.text)],
        )?;
        self.remember(block, &summary, stream)?;
        let node = self.leaf(block, token_start, summary);
        let trace = NodeTrace {
            node_id: node.node_id.clone(),
            prompt: Some(prompt),
            retrieved,
        };
        Ok((node, trace))
    }

    fn merge(&self, level: usize, position: usize, children: &[&SummaryNode]) -> Result<(SummaryNode, NodeTrace), SummarizeError> {
        let id = node_id(level, position);
        let child_ids = children.iter().map(|c| c.node_id.clone()).collect();
        let (prompt, text) = if let [only] = children {
            (None, only.text.clone())
        } else {
            let parts = children
                .iter()
                .enumerate()
                .map(|(i, c)| format!("Part {}: {}", i + 1, c.text))
                .collect::<Vec<_>>()
                .join("\n\n");
            let (p, t) = self.call(PromptRole::MergeSummarization, &[("summaries", &parts)])?;
            (Some(p), t)
        };
        let node = SummaryNode {
            node_id: id.clone(),
            level,
            children: child_ids,
            source_span: None,
            byte_span: None,
            token_count: self.engine.tokenizer.count(&text),
            text,
        };
        Ok((node, NodeTrace { node_id: id, prompt, retrieved: Vec::new() }))
    }

    pub fn hierarchical_summarize(
        &self,
        document: &str,
        checkpoint_dir: Option<&Path>,
    ) -> Result<SummaryRun, SummarizeError> {
        self.config.validate()?;
        if document.trim().is_empty() {
            return Err(SummarizeError::EmptyDocument);
        }
        let tokenizer = self.engine.tokenizer.as_ref();
        let blocks = chunk_document(document, self.config.block_token_budget, tokenizer);
        let header = CheckpointHeader {
            document_hash: format!("{:016x}", fnv1a64(document.as_bytes())),
            blocks: blocks.len(),
            config: self.config,
        };
        let checkpoint = checkpoint_dir
            .map(|d| Checkpoint::open(d, &header))
            .transpose()?;
        let done = |id: &str| checkpoint.as_ref().and_then(|c| c.done.get(id));

        let mut nodes: Vec<SummaryNode> = Vec::new();
        let mut traces = Vec::new();
        let mut resumed_nodes = 0;
        let mut stream = MemoryStream::new(self.engine.embedder.dimension());
        let mut token_start = 0;
        let mut level_ids = Vec::new();

        for block in &blocks {
            let (node, trace) = match done(&node_id(1, block.index)) {
                Some(rec) => {
                    // replay the memory side effects of the finished block
                    let retrieved = self.recall(block, &mut stream)?;
                    if retrieved != rec.trace.retrieved {
                        return Err(SummarizeError::Checkpoint(format!(
                            "replayed retrieval for block {} diverges from checkpoint",
                            block.index
                        )));
                    }
                    self.remember(block, &rec.node.text, &mut stream)?;
                    resumed_nodes += 1;
                    (rec.node.clone(), rec.trace.clone())
                }
                None => {
                    let (node, trace) = self.summarize_block(block, token_start, &mut stream)?;
                    if let Some(c) = &checkpoint {
                        c.record(&node, &trace)?;
                    }
                    (node, trace)
                }
            };
            token_start += block.token_count;
            level_ids.push(node.node_id.clone());
            nodes.push(node);
            traces.push(trace);
        }
        let mut levels = vec![level_ids];

        let fanout = self.config.merge_fanout;
        while levels.last().expect("level").len() > 1 {
            let level = levels.len() + 1;
            let below: Vec<&SummaryNode> = levels
                .last()
                .expect("level")
                .iter()
                .map(|id| nodes.iter().find(|n| &n.node_id == id).expect("node"))
                .collect();
            let groups: Vec<&[&SummaryNode]> = below.chunks(fanout).collect();
            let results: Vec<Result<(SummaryNode, NodeTrace, bool), SummarizeError>> = groups
                .par_iter()
                .enumerate()
                .map(|(pos, group)| {
                    if let Some(rec) = done(&node_id(level, pos)) {
                        return Ok((rec.node.clone(), rec.trace.clone(), true));
                    }
                    let (node, trace) = self.merge(level, pos, group)?;
                    if let Some(c) = &checkpoint {
                        c.record(&node, &trace)?;
                    }
                    Ok((node, trace, false))
                })
                .collect();
            let mut ids = Vec::new();
            let mut fresh = Vec::new();
            for r in results {
                let (node, trace, reused) = r?;
                resumed_nodes += usize::from(reused);
                ids.push(node.node_id.clone());
                fresh.push(node);
                traces.push(trace);
            }
            nodes.extend(fresh);
            levels.push(ids);
        }

        Ok(SummaryRun {
            tree: SummaryTree { nodes, levels },
            traces,
            resumed_nodes,
        })
    }
}

/// Write `tree.jsonl` (one node per line, level order), `final_summary.txt`
/// and `side_by_side.md` (each block next to its level-1 summary) into `dir`.
pub fn write_outputs(dir: &Path, document: &str, tree: &SummaryTree) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for level in &tree.levels {
        for id in level {
            let node = tree.node(id).expect("node");
            lines.push_str(&serde_json::to_string(node).map_err(std::io::Error::from)?);
            lines.push('\n');
        }
    }
    fs::write(dir.join("tree.jsonl"), lines)?;
    fs::write(dir.join("final_summary.txt"), format!("{}\n", tree.root().text.trim_end()))?;

    let mut sbs = String::from("# Blocks and their summaries\n");
    for id in &tree.levels[0] {
        let node = tree.node(id).expect("node");
        let (s, e) = node.byte_span.unwrap_or((0, 0));
        sbs.push_str(&format!(
            "\n## {id}\n\n### Source\n\n{}\n\n### Summary\n\n{}\n",
            document[s..e].trim_end(),
            node.text.trim_end()
        ));
    }
    fs::write(dir.join("side_by_side.md"), sbs)
}

/// Read a `tree.jsonl` produced by [`write_outputs`].
pub fn read_tree(path: &Path) -> std::io::Result<SummaryTree> {
    let text = fs::read_to_string(path)?;
    let mut nodes: Vec<SummaryNode> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        nodes.push(serde_json::from_str(line).map_err(std::io::Error::from)?);
    }
    let depth = nodes.iter().map(|n| n.level).max().unwrap_or(0);
    let levels = (1..=depth)
        .map(|l| {
            nodes
                .iter()
                .filter(|n| n.level == l)
                .map(|n| n.node_id.clone())
                .collect()
        })
        .collect();
    Ok(SummaryTree { nodes, levels })
}
