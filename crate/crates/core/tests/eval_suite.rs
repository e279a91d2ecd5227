use std::path::PathBuf;

use scm_core::agent::Ablation;
use scm_core::evalharness::{
    load_probes, offline_engine, probes_to_jsonl, run_eval, synthetic_suite, TurnScope,
    SUITE_CASES, SUITE_MAX_PROBE_TURN, SUITE_SEED,
};
use scm_core::EngineConfig;

fn bundled() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/probes.jsonl")
}

#[test]
fn bundled_suite_matches_generator() {
    let generated = probes_to_jsonl(&synthetic_suite(SUITE_SEED, SUITE_CASES));
    // SCM_BLESS=1 rewrites the shipped file
    if std::env::var_os("SCM_BLESS").is_some() {
        std::fs::write(bundled(), &generated).unwrap();
    }
    let shipped = std::fs::read_to_string(bundled()).unwrap();
    assert!(shipped == generated, "data/probes.jsonl is stale; rerun with SCM_BLESS=1");
}

#[test]
fn bundled_suite_shape() {
    let cases = load_probes(&bundled()).unwrap();
    assert!(cases.len() >= 40);
    assert!(cases.iter().all(|c| c.probe_turn <= SUITE_MAX_PROBE_TURN));
    assert!(cases.iter().any(|c| c.probe_turn + 1 == 200), "some session reaches 200 turns");
    assert!(cases.iter().any(|c| c.turn_scope == TurnScope::Single));
    assert!(cases.iter().any(|c| c.turn_scope == TurnScope::Multi));
    for c in &cases {
        assert!(!c.gold_memory_turns.contains(&(c.probe_turn - 1)), "gold never in flash");
    }
}

#[test]
fn ablation_metrics_on_bundled_suite() {
    let cases = load_probes(&bundled()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for ablation in Ablation::ALL {
        let traces = dir.path().join(ablation.as_str());
        let report = run_eval(&cases, EngineConfig::default(), ablation, offline_engine, Some(&traces)).unwrap();
        println!("{}", report.headline());
        assert_eq!(report.failed_cases, 0);
        assert_eq!(std::fs::read_dir(&traces).unwrap().count(), cases.len());
        reports.push(report);
    }
    let [full, no_controller, no_flash, no_activation] = &reports[..] else { unreachable!() };
    assert_eq!(full.memory_retrieval_recall, 1.0);
    assert_eq!(full.answer_accuracy, 1.0);
    assert!((full.memory_retrieval_recall - no_flash.memory_retrieval_recall).abs() <= 0.02);
    assert_eq!(no_activation.memory_retrieval_recall, 0.0);
    assert_eq!(no_activation.multi_turn_accuracy, 0.0);
    assert!(no_controller.multi_turn_accuracy < full.multi_turn_accuracy);
}

#[test]
fn eval_is_reproducible() {
    let cases = synthetic_suite(7, 6);
    let a = run_eval(&cases, EngineConfig::default(), Ablation::None, offline_engine, None).unwrap();
    let b = run_eval(&cases, EngineConfig::default(), Ablation::None, offline_engine, None).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
