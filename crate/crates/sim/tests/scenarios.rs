use std::path::PathBuf;

use tipcut_sim::{run, Metrics, RunOutput, Scenario};

fn load(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::load(&path).unwrap()
}

fn run_file(name: &str, seed: u64) -> RunOutput {
    let out = run(&load(name), seed).unwrap();
    assert!(out.ok(), "{name}: {:?}", out.metrics.violations);
    out
}

#[test]
fn fault_free_runs_at_one_and_a_half_round_trips() {
    let m = run_file("fault-free.toml", 1).metrics;
    assert!(m.committed_slots > 90, "{}", m.committed_slots);
    assert!((m.latency_mean_rt - 1.5).abs() <= 0.1, "{}", m.latency_mean_rt);
    assert_eq!(m.view_changes, 0);
    assert!(m.txs_executed > 1000);
    assert!(!m.halted);
    assert!(m.state_commits > 0);
}

#[test]
fn unpipelined_runs_at_two_and_a_half_round_trips() {
    let m = run_file("unpipelined.toml", 1).metrics;
    assert!((m.latency_mean_rt - 2.5).abs() <= 0.1, "{}", m.latency_mean_rt);
}

#[test]
fn cascade_delays_first_commit_past_ten_seconds() {
    let m = run_file("silent-leader-cascade.toml", 1).metrics;
    let first = m.first_commit_ms.unwrap();
    assert!(first > 10_000 && first < 15_000, "{first}");
}

#[test]
fn offline_lane_keeps_production_going() {
    let out = run_file("offline-lane.toml", 2);
    let m = &out.metrics;
    assert!(m.confirm_path_commits > 0);
    assert!(m.committed_slots > 25, "{}", m.committed_slots);
}

#[test]
fn withheld_batches_are_fetched() {
    let m = run_file("withheld-batches.toml", 3).metrics;
    assert!(m.fetch_requests > 0 && m.cars_fetched > 0);
    assert!(m.executed_heights > 0);
}

#[test]
fn divergence_thresholds() {
    let minority = run_file("minority-divergence.toml", 4).metrics;
    assert!(!minority.halted);
    assert!(minority.state_commits > 0);
    let majority = run_file("divergence.toml", 4).metrics;
    assert!(majority.halted);
    assert!(minority.state_lag_max < 1000 && majority.state_lag_max < 1000);
}

#[test]
fn missed_slots_cost_view_changes_only() {
    let m = run_file("missed-slot.toml", 5).metrics;
    assert!(m.view_changes > 0);
    assert!(m.committed_slots > 150, "{}", m.committed_slots);
}

#[test]
fn commits_resume_after_gst() {
    let out = run_file("partial-synchrony.toml", 6);
    let m = &out.metrics;
    assert!(m.committed_slots > 20, "{}", m.committed_slots);
}

#[test]
fn same_seed_same_trace() {
    let sc = load("partial-synchrony.toml");
    let a = run(&sc, 9).unwrap();
    let b = run(&sc, 9).unwrap();
    assert_eq!(a.trace_digest, b.trace_digest);
    assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
    let c = run(&sc, 10).unwrap();
    assert_ne!(a.trace_digest, c.trace_digest);
}

#[test]
fn metrics_recompute_from_trace_file() {
    let out = run_file("fault-free.toml", 7);
    let text = out.trace.to_jsonl();
    let parsed = tipcut_sim::trace::Trace::parse(&text).unwrap();
    assert_eq!(Metrics::from_trace(&parsed.records), out.metrics);
}
