//! Probing-question evaluation: replay a scripted session, ask a probe whose
//! answer lives in specific earlier turns, and score retrieval recall and
//! answer accuracy under each ablation.
//!
//! Offline runs use [`ReplayBackend`], which plays back a case's scripted
//! responses, answers controller questions deterministically and, on the
//! probe turn, answers with the memory context it was given. Answers are
//! judged by all-keywords containment.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Ablation, Engine, EngineConfig, Session, TurnTrace};
use crate::backend::{BackendError, CompletionRequest, GenerationBackend};
use crate::embedding::{embed_interaction, HashEmbedder};
use crate::memory::{MemoryStream, NewInteraction};
use crate::prompts::{PromptPack, PromptRole};
use crate::tokenizer::{HeuristicTokenizer, Tokenizer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("probe file line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("probe case {case_id}: {message}")]
    InvalidCase { case_id: String, message: String },
    #[error("eval I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnScope {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedTurn {
    pub observation: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCase {
    pub case_id: String,
    pub session_script: Vec<ScriptedTurn>,
    /// Turn index at which the probe is asked; equals the script length.
    pub probe_turn: usize,
    pub probe_text: String,
    pub gold_memory_turns: BTreeSet<usize>,
    pub gold_answer_keywords: Vec<String>,
    pub turn_scope: TurnScope,
}

impl ProbeCase {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |message: String| EvalError::InvalidCase {
            case_id: self.case_id.clone(),
            message,
        };
        if self.probe_turn != self.session_script.len() {
            return Err(bad(format!(
                "probe turn {} does not follow a script of {} turns",
                self.probe_turn,
                self.session_script.len()
            )));
        }
        if let Some(&g) = self.gold_memory_turns.iter().find(|&&g| g >= self.probe_turn) {
            return Err(bad(format!("gold turn {g} is not before the probe")));
        }
        if self.turn_scope == TurnScope::Multi && self.gold_memory_turns.len() < 2 {
            return Err(bad("multi-turn case needs at least two gold turns".into()));
        }
        if self.gold_answer_keywords.is_empty() {
            return Err(bad("no answer keywords".into()));
        }
        if self.probe_text.trim().is_empty()
            || self.session_script.iter().any(|t| t.observation.trim().is_empty())
        {
            return Err(bad("empty observation".into()));
        }
        Ok(())
    }
}

/// Fraction of gold turns present in the probe turn's retrieved set, and
/// whether the value is vacuous (empty gold set, defined as 1.0).
pub fn retrieval_recall(trace: &TurnTrace, gold: &BTreeSet<usize>) -> (f64, bool) {
    if gold.is_empty() {
        return (1.0, true);
    }
    let retrieved: HashSet<usize> = trace.retrieved.iter().map(|r| r.item_index).collect();
    let hit = gold.iter().filter(|g| retrieved.contains(g)).count();
    (hit as f64 / gold.len() as f64, false)
}

/// Every keyword occurs in `response`, ignoring case.
pub fn answer_match(response: &str, keywords: &[String]) -> bool {
    let response = response.to_lowercase();
    !response.is_empty() && keywords.iter().all(|k| response.contains(&k.to_lowercase()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub turn_scope: TurnScope,
    pub gold_memory_turns: BTreeSet<usize>,
    pub retrieved: Vec<usize>,
    pub recall: f64,
    pub recall_vacuous: bool,
    pub correct: bool,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ablation: Ablation,
    pub cases: usize,
    pub answer_accuracy: f64,
    pub memory_retrieval_recall: f64,
    pub single_turn_accuracy: f64,
    pub multi_turn_accuracy: f64,
    pub failed_cases: usize,
    pub records: Vec<CaseRecord>,
}

impl EvalReport {
    fn aggregate(ablation: Ablation, records: Vec<CaseRecord>) -> Self {
        let mean = |xs: &mut dyn Iterator<Item = f64>| {
            let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            if n == 0 { 0.0 } else { sum / n as f64 }
        };
        let acc = |scope: Option<TurnScope>| {
            mean(&mut records
                .iter()
                .filter(|r| scope.is_none_or(|s| r.turn_scope == s))
                .map(|r| if r.correct { 1.0 } else { 0.0 }))
        };
        Self {
            ablation,
            cases: records.len(),
            answer_accuracy: acc(None),
            memory_retrieval_recall: mean(&mut records.iter().map(|r| r.recall)),
            single_turn_accuracy: acc(Some(TurnScope::Single)),
            multi_turn_accuracy: acc(Some(TurnScope::Multi)),
            failed_cases: records.iter().filter(|r| r.error.is_some()).count(),
            records,
        }
    }

    /// One-line summary of the four headline metrics.
    pub fn headline(&self) -> String {
        format!(
            "ablation={} cases={} answer_acc={:.3} recall={:.3} single_acc={:.3} multi_acc={:.3} failed={}",
            self.ablation.as_str(),
            self.cases,
            self.answer_accuracy,
            self.memory_retrieval_recall,
            self.single_turn_accuracy,
            self.multi_turn_accuracy,
            self.failed_cases
        )
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        text.push('\n');
        fs::write(path, text)
    }
}

pub fn parse_probes(text: &str) -> Result<Vec<ProbeCase>, EvalError> {
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let case: ProbeCase = serde_json::from_str(line).map_err(|e| EvalError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        case.validate()?;
        cases.push(case);
    }
    Ok(cases)
}

pub fn load_probes(path: &Path) -> Result<Vec<ProbeCase>, EvalError> {
    parse_probes(&fs::read_to_string(path)?)
}

pub fn probes_to_jsonl(cases: &[ProbeCase]) -> String {
    let mut out = String::new();
    for c in cases {
        out.push_str(&serde_json::to_string(c).expect("probe cases serialize"));
        out.push('\n');
    }
    out
}

/// Last sentence of `text`; the replay stand-in for a turn summary.
pub fn last_sentence(text: &str) -> &str {
    let t = text.trim();
    match t.rfind(". ") {
        Some(i) => &t[i + 2..],
        None => t,
    }
}

/// Deterministic offline backend for one probe case.
#[derive(Debug)]
pub struct ReplayBackend {
    responses: Vec<String>,
    probe_text: String,
    cursor: Mutex<usize>,
}

impl ReplayBackend {
    pub fn new(case: &ProbeCase) -> Self {
        Self {
            responses: case.session_script.iter().map(|t| t.response.clone()).collect(),
            probe_text: case.probe_text.clone(),
            cursor: Mutex::new(0),
        }
    }
}

impl GenerationBackend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn max_context_tokens(&self) -> usize {
        usize::MAX
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let input = |name: &str| request.input(name).unwrap_or_default().to_string();
        let is_probe = request.input("observation") == Some(self.probe_text.as_str());
        Ok(match request.role {
            // memory is wanted only for the probe
            PromptRole::ActivationDecision if is_probe => "yes(A)".into(),
            PromptRole::ActivationDecision => "no(B)".into(),
            PromptRole::SummaryDecision => "yes(A)".into(),
            PromptRole::TurnSummarization => last_sentence(&input("text")).to_string(),
            PromptRole::DialogueFusion if is_probe => input("context"),
            PromptRole::DialogueFusion => {
                let mut cursor = self.cursor.lock().unwrap();
                let response = self.responses.get(*cursor).cloned().ok_or_else(|| {
                    BackendError::Rejected("replay script exhausted".into())
                })?;
                *cursor += 1;
                response
            }
            PromptRole::BlockSummarization => input("block"),
            PromptRole::MergeSummarization => input("summaries"),
        })
    }
}

/// Engine for offline evaluation: replay backend, hash embeddings of
/// dimension 256, heuristic tokenizer and the English prompt pack.
pub fn offline_engine(case: &ProbeCase) -> Engine {
    Engine {
        backend: Arc::new(ReplayBackend::new(case)),
        embedder: Arc::new(HashEmbedder::default()),
        tokenizer: Arc::new(HeuristicTokenizer),
        prompts: Arc::new(PromptPack::english()),
    }
}

fn run_case(case: &ProbeCase, config: EngineConfig, engine: &Engine) -> Result<TurnTrace, String> {
    let mut session = Session::new(&case.case_id, config, engine).map_err(|e| e.to_string())?;
    for (turn, step) in case.session_script.iter().enumerate() {
        session
            .run_turn(engine, &step.observation)
            .map_err(|e| format!("turn {turn}: {e}"))?;
    }
    session
        .run_turn(engine, &case.probe_text)
        .map(|(_, trace)| trace)
        .map_err(|e| format!("probe: {e}"))
}

/// Replay every case under `ablation` (cases run in parallel) and aggregate.
/// A failing case counts as incorrect with zero recall. With `trace_dir`,
/// each case's probe-turn trace is written to `<case_id>.json`.
pub fn run_eval<F>(
    cases: &[ProbeCase],
    config: EngineConfig,
    ablation: Ablation,
    make_engine: F,
    trace_dir: Option<&Path>,
) -> Result<EvalReport, EvalError>
where
    F: Fn(&ProbeCase) -> Engine + Sync,
{
    for case in cases {
        case.validate()?;
    }
    if let Some(dir) = trace_dir {
        fs::create_dir_all(dir)?;
    }
    let config = EngineConfig { ablation, ..config };
    let records: Vec<Result<CaseRecord, EvalError>> = cases
        .par_iter()
        .map(|case| {
            let engine = make_engine(case);
            let mut record = CaseRecord {
                case_id: case.case_id.clone(),
                turn_scope: case.turn_scope,
                gold_memory_turns: case.gold_memory_turns.clone(),
                retrieved: Vec::new(),
                recall: 0.0,
                recall_vacuous: false,
                correct: false,
                response: String::new(),
                error: None,
            };
            match run_case(case, config, &engine) {
                Ok(trace) => {
                    let (recall, vacuous) = retrieval_recall(&trace, &case.gold_memory_turns);
                    record.retrieved = trace.retrieved.iter().map(|r| r.item_index).collect();
                    record.recall = recall;
                    record.recall_vacuous = vacuous;
                    record.correct = answer_match(&trace.response, &case.gold_answer_keywords);
                    record.response = trace.response.clone();
                    if let Some(dir) = trace_dir {
                        let text = serde_json::to_string_pretty(&trace).map_err(std::io::Error::from)?;
                        fs::write(dir.join(format!("{}.json", case.case_id)), text)?;
                    }
                }
                Err(e) => {
                    log::warn!("case {} failed: {e}", case.case_id);
                    record.error = Some(e);
                }
            }
            Ok(record)
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::aggregate(ablation, records))
}

// ---------------------------------------------------------------------------
// Synthetic suite

pub const SUITE_SEED: u64 = 0x5c3d_2024;
pub const SUITE_CASES: usize = 48;
pub const SUITE_MAX_PROBE_TURN: usize = 199;

/// The shipped suite, `synthetic_suite(SUITE_SEED, SUITE_CASES)` as JSONL.
pub const BUNDLED_PROBES: &str = include_str!("../data/probes.jsonl");

pub fn bundled_suite() -> Result<Vec<ProbeCase>, EvalError> {
    parse_probes(BUNDLED_PROBES)
}
/// Gold turns sit at most this many turns before the probe so that their
/// recency does not sink below that of fresh filler.
const GOLD_WINDOW: usize = 40;
/// Distractor facts sit at least this far back.
const DISTRACTOR_MIN_GAP: usize = 70;
const LONG_TURN_TOKENS: usize = 1400;

const ATTRIBUTES: [(&str, &str); 24] = [
    ("first", "sport"),
    ("bicycle", "color"),
    ("landlord", "name"),
    ("dentist", "weekday"),
    ("passport", "code"),
    ("favorite", "novel"),
    ("garden", "plant"),
    ("wifi", "password"),
    ("childhood", "pet"),
    ("piano", "teacher"),
    ("lucky", "charm"),
    ("hometown", "river"),
    ("wedding", "venue"),
    ("car", "model"),
    ("coffee", "order"),
    ("gym", "locker"),
    ("birthday", "dessert"),
    ("project", "codename"),
    ("sister", "city"),
    ("allergy", "medicine"),
    ("boat", "harbor"),
    ("violin", "brand"),
    ("cousin", "nickname"),
    ("office", "floor"),
];

const FILLER_WORDS: [&str; 48] = [
    "weather", "train", "late", "lunch", "rain", "window", "meeting", "quiet", "walked", "market",
    "bread", "evening", "traffic", "movie", "tired", "music", "kitchen", "cleaned", "busy",
    "morning", "tea", "laptop", "email", "sunny", "cold", "news", "podcast", "dinner", "bus",
    "street", "noisy", "neighbors", "paint", "shelf", "plans", "weekend", "calm", "cloudy",
    "breeze", "groceries", "laundry", "snack", "nap", "series", "episode", "chores", "park",
    "bench",
];

const FILLER_REPLIES: [&str; 6] = [
    "sounds like a full day",
    "that seems pleasant enough",
    "thanks for sharing that",
    "okay tell me more",
    "that happens sometimes",
    "noted and understood",
];

const SYLLABLES: [&str; 16] = [
    "ka", "zor", "vel", "mi", "tan", "shu", "rob", "lei", "qua", "dex", "fin", "gal", "pum",
    "triv", "ol", "nes",
];

fn filler_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(6..=11);
    (0..n)
        .map(|_| *FILLER_WORDS.choose(rng).expect("nonempty"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn fact_sentence(attr: (&str, &str), value: &str) -> String {
    format!("remember my {} {} is {}", attr.0, attr.1, value)
}

fn fact_reply(attr: (&str, &str), value: &str) -> String {
    format!("i will remember your {} {} is {}", attr.0, attr.1, value)
}

/// A long story whose final sentence states the fact.
fn long_fact_turn(rng: &mut ChaCha8Rng, attr: (&str, &str), value: &str) -> String {
    let tok = HeuristicTokenizer;
    let tail = fact_sentence(attr, value);
    let mut text = String::new();
    while tok.count(&text) + tok.count(&tail) + 2 < LONG_TURN_TOKENS {
        text.push_str(&filler_sentence(rng));
        text.push_str(". ");
    }
    text.push_str(&tail);
    text
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    (0..3).map(|_| *SYLLABLES.choose(rng).expect("nonempty")).collect()
}

/// Turn summaries as the replay backend and the default passthrough rule
/// produce them.
fn expected_summary(text: &str) -> &str {
    if HeuristicTokenizer.count(text) <= crate::agent::DEFAULT_SUMMARY_PASSTHROUGH_TOKENS {
        text
    } else {
        last_sentence(text)
    }
}

/// Gold turns must rank in the top-k at the probe both with the previous
/// turn excluded (flash on) and with it eligible (flash off).
fn gold_is_reachable(case: &ProbeCase) -> bool {
    let embedder = HashEmbedder::default();
    let config = EngineConfig::default().retrieval;
    let mut stream = MemoryStream::new(256);
    for t in &case.session_script {
        let obs = expected_summary(&t.observation).to_string();
        let resp = expected_summary(&t.response).to_string();
        let embedding = embed_interaction(&embedder, &obs, &resp).expect("nonempty text");
        stream
            .append(
                NewInteraction {
                    observation: t.observation.clone(),
                    response: t.response.clone(),
                    observation_summary: obs,
                    response_summary: resp,
                    embedding,
                },
                &HeuristicTokenizer,
            )
            .expect("in-memory append");
    }
    let query = crate::embedding::hash_embed(&case.probe_text, 256);
    let flash: HashSet<usize> = [case.probe_turn - 1].into();
    [flash, HashSet::new()].iter().all(|exclude| {
        let top: HashSet<usize> = stream
            .rank(&query, case.probe_turn, &config, exclude)
            .expect("valid ranking")
            .iter()
            .map(|r| r.item_index)
            .collect();
        case.gold_memory_turns.is_subset(&top.into_iter().collect())
    })
}

fn build_case(id: usize, rng: &mut ChaCha8Rng, values: &mut HashSet<String>) -> ProbeCase {
    let scope = if id.is_multiple_of(2) { TurnScope::Single } else { TurnScope::Multi };
    let n_gold = match scope {
        TurnScope::Single => 1,
        TurnScope::Multi if id % 4 == 3 => 3,
        TurnScope::Multi => 2,
    };
    // every third case states its facts inside long turns
    let long = id.is_multiple_of(3);
    let probe_turn = if id % 8 == 1 {
        SUITE_MAX_PROBE_TURN
    } else {
        rng.random_range(DISTRACTOR_MIN_GAP + 10..=SUITE_MAX_PROBE_TURN)
    };

    let mut attrs: Vec<(&str, &str)> = ATTRIBUTES.to_vec();
    let first = attrs.remove(id % ATTRIBUTES.len());
    attrs.shuffle(rng);
    attrs.insert(0, first);
    let mut fresh_value = |rng: &mut ChaCha8Rng| loop {
        let v = pseudo_word(rng);
        if values.insert(v.clone()) {
            return v;
        }
    };
    let gold_facts: Vec<((&str, &str), String)> = (0..n_gold)
        .map(|i| {
            let v = if id == 0 && i == 0 { "running".to_string() } else { fresh_value(rng) };
            (attrs[i], v)
        })
        .collect();
    let distractors: Vec<((&str, &str), String)> = (0..rng.random_range(1..=3))
        .map(|i| (attrs[n_gold + i], fresh_value(rng)))
        .collect();

    let mut gold = BTreeSet::new();
    while gold.len() < n_gold {
        gold.insert(probe_turn - rng.random_range(2..=GOLD_WINDOW));
    }
    let mut script: Vec<ScriptedTurn> = (0..probe_turn)
        .map(|_| ScriptedTurn {
            observation: filler_sentence(rng),
            response: FILLER_REPLIES.choose(rng).expect("nonempty").to_string(),
        })
        .collect();
    for (turn, (attr, value)) in gold.iter().zip(&gold_facts) {
        script[*turn] = ScriptedTurn {
            observation: if long { long_fact_turn(rng, *attr, value) } else { fact_sentence(*attr, value) },
            response: fact_reply(*attr, value),
        };
    }
    for (attr, value) in &distractors {
        let turn = rng.random_range(0..=probe_turn - DISTRACTOR_MIN_GAP);
        if !gold.contains(&turn) {
            script[turn] = ScriptedTurn {
                observation: fact_sentence(*attr, value),
                response: fact_reply(*attr, value),
            };
        }
    }

    let asked: Vec<String> = gold_facts
        .iter()
        .map(|((a, b), _)| format!("my {a} {b}"))
        .collect();
    ProbeCase {
        case_id: format!("case-{id:03}"),
        session_script: script,
        probe_turn,
        probe_text: format!("do you remember {}", asked.join(" and ")),
        gold_memory_turns: gold,
        gold_answer_keywords: gold_facts.into_iter().map(|(_, v)| v).collect(),
        turn_scope: scope,
    }
}

/// The bundled synthetic probe suite. Deterministic in `seed`. Cases whose
/// gold turns would not be retrievable under the default configuration are
/// redrawn, so full retrieval recall holds by construction.
pub fn synthetic_suite(seed: u64, cases: usize) -> Vec<ProbeCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = HashSet::new();
    (0..cases)
        .map(|id| loop {
            let mut attempt_values = values.clone();
            let case = build_case(id, &mut rng, &mut attempt_values);
            if gold_is_reachable(&case) {
                values = attempt_values;
                break case;
            }
        })
        .collect()
}
