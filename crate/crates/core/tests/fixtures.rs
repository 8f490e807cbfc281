use std::path::PathBuf;

use cvr_core::orchestrator::Strategy;
use cvr_core::sim::{simulate, sweep, Scenario};

fn fixture(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    Scenario::load(&path).unwrap()
}

#[test]
fn dedup_replay_accounting() {
    let run = simulate(&fixture("dedup_replay.json")).unwrap();
    let d = &run.metrics.dedup;
    assert_eq!(d.povs_total, 122);
    assert_eq!(d.povs_deduplicated, 65);
    assert_eq!(d.patches_stored, 42);
    assert_eq!(d.povs_unresolved, 15);
    assert!(run.violations.is_empty(), "{:?}", run.violations);
}

#[test]
fn dedup_replay_is_seed_independent() {
    let base = fixture("dedup_replay.json");
    for seed in [1, 2, 3, 99] {
        let d = simulate(&base.with_seed(seed)).unwrap().metrics.dedup;
        assert_eq!((d.povs_total, d.povs_deduplicated, d.patches_stored), (122, 65, 42), "seed {seed}");
    }
}

#[test]
fn three_bug_patch_covers_all_three() {
    let run = simulate(&fixture("three_bug.json")).unwrap();
    let d = &run.metrics.dedup;
    assert_eq!(d.patches_stored, 1);
    assert_eq!(d.povs_deduplicated, 2);
    assert!(run.violations.is_empty());
}

#[test]
fn reference_sweep_orders_strategies() {
    let seeds: Vec<u64> = (1..=30).collect();
    let s = sweep(&fixture("reference_5agent.json"), &Strategy::ALL, &seeds).unwrap();
    let seq = s.summary(Strategy::Sequential).unwrap();
    let fp2 = s.summary(Strategy::Fp2).unwrap();
    let par = s.summary(Strategy::Parallel).unwrap();
    assert!(par.median_latency_ms <= fp2.median_latency_ms && fp2.median_latency_ms <= seq.median_latency_ms);
    assert!(seq.median_cost <= fp2.median_cost && fp2.median_cost <= par.median_cost);
    assert_eq!(s.rows.len(), 90);
    assert!(s.rows.iter().all(|r| r.error == 0));
}

#[test]
fn top_agent_wins_its_share() {
    let m = simulate(&fixture("top_agent_share.json")).unwrap().metrics;
    assert_eq!(m.tasks + m.tasks_cancelled, 10_000);
    assert!((m.top_agent_share - 0.91).abs() <= 0.03, "share {}", m.top_agent_share);
    for (p, peak) in &m.provider_peaks {
        assert!(*peak <= m.provider_caps[p], "{p} peaked at {peak}");
    }
}
