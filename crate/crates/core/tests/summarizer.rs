use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use scm_core::backend::{BackendError, CompletionRequest};
use scm_core::summarizer::{read_tree, write_outputs, SummarizeConfig, SummarizeError, Summarizer};
use scm_core::{
    CallPolicy, Engine, GenerationBackend, HashEmbedder, HeuristicTokenizer, PromptPack, PromptRole,
};

/// Deterministic summarizer backend that starts failing after `budget` calls.
struct Countdown {
    budget: AtomicUsize,
}

impl Countdown {
    fn new(budget: usize) -> Self {
        Self { budget: AtomicUsize::new(budget) }
    }
}

impl GenerationBackend for Countdown {
    fn name(&self) -> &str {
        "countdown"
    }

    fn max_context_tokens(&self) -> usize {
        usize::MAX
    }

    fn complete(&self, r: &CompletionRequest) -> Result<String, BackendError> {
        if self
            .budget
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
            .is_err()
        {
            return Err(BackendError::Rejected("simulated crash".into()));
        }
        Ok(match r.role {
            PromptRole::BlockSummarization => {
                let block = r.input("block").unwrap_or_default();
                let head: Vec<&str> = block.split_whitespace().take(3).collect();
                format!("summary of {}", head.join(" "))
            }
            PromptRole::MergeSummarization => {
                let s = r.input("summaries").unwrap_or_default();
                format!("merge of {} parts", s.matches("Part ").count())
            }
            _ => "(A)".into(),
        })
    }
}

fn engine(backend: Arc<dyn GenerationBackend>) -> Engine {
    Engine {
        backend,
        embedder: Arc::new(HashEmbedder::default()),
        tokenizer: Arc::new(HeuristicTokenizer),
        prompts: Arc::new(PromptPack::english()),
    }
}

fn document(sections: usize) -> String {
    (0..sections)
        .map(|i| {
            format!(
                "chapter {i} begins here. The {} travelled far and the road was long. {}\n\n",
                ["miller", "sailor", "weaver", "smith"][i % 4],
                "They walked on through fields and towns. ".repeat(8)
            )
        })
        .collect()
}

fn config() -> SummarizeConfig {
    SummarizeConfig { block_token_budget: 120, ..SummarizeConfig::default() }
}

#[test]
fn resume_after_a_crash_matches_an_uninterrupted_run() {
    let doc = document(23);
    let reference_engine = engine(Arc::new(Countdown::new(usize::MAX)));
    let reference = Summarizer { engine: &reference_engine, config: config(), policy: CallPolicy::default() }
        .hierarchical_summarize(&doc, None)
        .unwrap();
    let blocks = reference.tree.levels[0].len();
    assert!(reference.tree.levels.len() >= 3);

    // crash inside level 1, then inside the merges
    for crash_after in [blocks / 2, blocks + 2] {
        let dir = tempfile::tempdir().unwrap();
        let crashing = engine(Arc::new(Countdown::new(crash_after)));
        let first = Summarizer { engine: &crashing, config: config(), policy: CallPolicy::default() }
            .hierarchical_summarize(&doc, Some(dir.path()));
        assert!(matches!(first, Err(SummarizeError::Backend(_))));

        let healthy = engine(Arc::new(Countdown::new(usize::MAX)));
        let resumed = Summarizer { engine: &healthy, config: config(), policy: CallPolicy::default() }
            .hierarchical_summarize(&doc, Some(dir.path()))
            .unwrap();
        assert_eq!(resumed.tree, reference.tree);
        assert_eq!(resumed.traces, reference.traces);
        assert_eq!(resumed.resumed_nodes, crash_after);

        // a third run redoes nothing
        let idle = engine(Arc::new(Countdown::new(0)));
        let again = Summarizer { engine: &idle, config: config(), policy: CallPolicy::default() }
            .hierarchical_summarize(&doc, Some(dir.path()))
            .unwrap();
        assert_eq!(again.tree, reference.tree);
    }
}

#[test]
fn checkpoint_of_another_document_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(Arc::new(Countdown::new(usize::MAX)));
    let s = Summarizer { engine: &e, config: config(), policy: CallPolicy::default() };
    s.hierarchical_summarize(&document(3), Some(dir.path())).unwrap();
    let err = s.hierarchical_summarize(&document(4), Some(dir.path())).unwrap_err();
    assert!(matches!(err, SummarizeError::Checkpoint(_)));
}

#[test]
fn torn_checkpoint_tail_is_redone() {
    let doc = document(9);
    let dir = tempfile::tempdir().unwrap();
    let e = engine(Arc::new(Countdown::new(usize::MAX)));
    let s = Summarizer { engine: &e, config: config(), policy: CallPolicy::default() };
    let full = s.hierarchical_summarize(&doc, Some(dir.path())).unwrap();
    let path = dir.path().join("nodes.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() - 10]).unwrap();
    let again = s.hierarchical_summarize(&doc, Some(dir.path())).unwrap();
    assert_eq!(again.tree, full.tree);
    assert_eq!(again.resumed_nodes, full.tree.nodes.len() - 1);
}

#[test]
fn block_prompts_carry_earlier_summaries_only() {
    let doc = document(12);
    let e = engine(Arc::new(Countdown::new(usize::MAX)));
    let run = Summarizer { engine: &e, config: config(), policy: CallPolicy::default() }
        .hierarchical_summarize(&doc, None)
        .unwrap();
    let blocks = run.tree.levels[0].len();
    for (i, trace) in run.traces[..blocks].iter().enumerate() {
        let prompt = trace.prompt.as_ref().unwrap();
        assert!(trace.retrieved.len() <= 3);
        assert_eq!(trace.retrieved.len(), i.min(3));
        assert!(trace.retrieved.iter().all(|&j| j < i));
        for &j in &trace.retrieved {
            assert!(prompt.contains(&format!("Section {j}: ")));
        }
        if i == 0 {
            assert!(prompt.contains("(none)"));
        }
    }
}

#[test]
fn singleton_groups_pass_through_without_a_call() {
    // 5 blocks with fanout 4: level 2 is [4 children, 1 child]
    let doc = document(5);
    let cfg = SummarizeConfig { block_token_budget: 150, ..SummarizeConfig::default() };
    let e = engine(Arc::new(Countdown::new(usize::MAX)));
    let run = Summarizer { engine: &e, config: cfg, policy: CallPolicy::default() }
        .hierarchical_summarize(&doc, None)
        .unwrap();
    assert_eq!(run.tree.level_sizes(), vec![5, 2, 1]);
    let lone = run.tree.node("L2-1").unwrap();
    assert_eq!(lone.children, vec!["L1-4".to_string()]);
    assert_eq!(lone.text, run.tree.node("L1-4").unwrap().text);
    let trace = run.traces.iter().find(|t| t.node_id == "L2-1").unwrap();
    assert!(trace.prompt.is_none());
    run.tree.validate(&doc).unwrap();
}

#[test]
fn outputs_round_trip() {
    let doc = document(7);
    let e = engine(Arc::new(Countdown::new(usize::MAX)));
    let run = Summarizer { engine: &e, config: config(), policy: CallPolicy::default() }
        .hierarchical_summarize(&doc, None)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &doc, &run.tree).unwrap();
    let tree = read_tree(&dir.path().join("tree.jsonl")).unwrap();
    assert_eq!(tree, run.tree);
    let final_summary = std::fs::read_to_string(dir.path().join("final_summary.txt")).unwrap();
    assert_eq!(final_summary.trim_end(), run.tree.root().text);
    let side = std::fs::read_to_string(dir.path().join("side_by_side.md")).unwrap();
    assert_eq!(side.matches("### Summary").count(), run.tree.levels[0].len());
}

#[test]
fn empty_document_and_bad_config_are_errors() {
    let e = engine(Arc::new(Countdown::new(usize::MAX)));
    let s = Summarizer { engine: &e, config: config(), policy: CallPolicy::default() };
    assert!(matches!(s.hierarchical_summarize("  \n", None), Err(SummarizeError::EmptyDocument)));
    let bad = Summarizer {
        engine: &e,
        config: SummarizeConfig { merge_fanout: 1, ..config() },
        policy: CallPolicy::default(),
    };
    assert!(matches!(bad.hierarchical_summarize("text", None), Err(SummarizeError::Config(_))));
}

#[test]
fn meeting_transcripts_split_at_speaker_turns() {
    let transcript: String = (0..30)
        .map(|i| format!("{}: point number {i} about the release plan and its risks\n", ["ALICE", "BOB", "CHEN"][i % 3]))
        .collect();
    let e = engine(Arc::new(Countdown::new(usize::MAX)));
    let cfg = SummarizeConfig { block_token_budget: 60, ..SummarizeConfig::default() };
    let run = Summarizer { engine: &e, config: cfg, policy: CallPolicy::default() }
        .hierarchical_summarize(&transcript, None)
        .unwrap();
    for id in &run.tree.levels[0] {
        let (s, _) = run.tree.node(id).unwrap().byte_span.unwrap();
        let rest = &transcript[s..];
        assert!(["ALICE:", "BOB:", "CHEN:"].iter().any(|p| rest.starts_with(p)));
    }
    run.tree.validate(&transcript).unwrap();
}
