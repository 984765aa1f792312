mod common;

use common::check_accounting;
use rollsim_core::config::{PolicyKind, RunConfig};
use rollsim_core::history_store::Response;
use rollsim_core::sim::{events_jsonl, run, SimError};
use rollsim_core::trace::{generate, Trace, TraceSpec};

fn uniform_trace(prompts: usize, group: usize, epochs: u32, len: usize) -> Trace {
    let mut rs = Vec::new();
    for e in 1..=epochs {
        for p in 0..prompts {
            for _ in 0..group {
                rs.push(Response::new(format!("p{p:05}"), e, vec![7; len], 1.0));
            }
        }
    }
    Trace::new(rs)
}

fn small_cluster(policy: PolicyKind) -> RunConfig {
    let mut c = RunConfig::default();
    c.sim.policy = policy;
    c.cluster.rollout_workers = 8;
    c.cluster.reward_workers = 2;
    c.cluster.n_groups = 4;
    c.sim.prompts_per_step = 8;
    c
}

fn migrating_run(seed: u64) -> (Trace, RunConfig) {
    let mut spec = TraceSpec::long_tail(32, 5, seed);
    spec.base_len.mu = 300f64.ln();
    spec.max_len = 4096;
    let trace = generate(&spec).unwrap();
    let mut cfg = small_cluster(PolicyKind::HistopipeTwoTier);
    cfg.cost.train_fixed = 1.0;
    cfg.cost.train_per_sample = 0.005;
    (trace, cfg)
}

#[test]
fn uniform_lengths_leave_no_bubble() {
    let trace = uniform_trace(8, 4, 6, 200);
    for policy in PolicyKind::ALL {
        let mut cfg = small_cluster(policy);
        cfg.cluster.rollout_workers = 4;
        cfg.cluster.n_groups = 2;
        cfg.sim.prompts_per_step = 4;
        cfg.spec.enabled = false;
        cfg.cost.train_fixed = 0.0;
        cfg.cost.train_per_sample = 1e-4;
        cfg.cost.reward_per_sample = 1e-4;
        cfg.cluster.weight_propagation_delay = 0.0;
        let out = run(&trace, &cfg).unwrap();
        // With training faster than the shortest group, the planner still
        // staggers equal groups (t0 is that group's time on max_wks workers).
        let bound = if policy == PolicyKind::HistopipeTwoTier { 0.1 } else { 0.001 };
        assert!(out.report.bubble_fraction < bound, "{policy:?}: {}", out.report.bubble_fraction);
        assert_eq!(out.report.migration_pct, 0.0);
    }
}

#[test]
fn non_speculative_time_is_length_times_iteration_cost() {
    let trace = uniform_trace(1, 1, 1, 50);
    let mut cfg = RunConfig::default();
    cfg.sim.policy = PolicyKind::Colocated;
    cfg.cluster.rollout_workers = 1;
    cfg.sim.prompts_per_step = 1;
    cfg.spec.enabled = false;
    let out = run(&trace, &cfg).unwrap();
    let k = &cfg.cost;
    let per_token = k.iter_base + k.iter_per_seq + k.iter_per_token;
    let expected = k.prefill_per_token * k.prompt_len as f64 + 50.0 * per_token;
    let row = &out.timeline[0];
    assert_eq!((row.worker_id.as_str(), row.activity.as_str()), ("rollout-0", "rollout"));
    assert!((row.end - row.start - expected).abs() < 1e-6, "{} vs {expected}", row.end - row.start);
}

#[test]
fn speculation_shortens_rollout_on_repetitive_history() {
    let mut spec = TraceSpec::long_tail(16, 2, 3);
    spec.base_len.mu = 400f64.ln();
    spec.similarity = 0.95;
    let trace = generate(&spec).unwrap();
    let mut cfg = small_cluster(PolicyKind::Streaming);
    cfg.sim.history_epochs = 1;
    cfg.sim.prompts_per_step = 4;
    cfg.spec.enabled = false;
    let plain = run(&trace, &cfg).unwrap().report;
    cfg.spec.enabled = true;
    let fast = run(&trace, &cfg).unwrap().report;
    assert!(fast.acceptance_rate > 0.7, "{}", fast.acceptance_rate);
    assert!(fast.makespan_s < plain.makespan_s);
    assert_eq!(fast.tokens_generated, plain.tokens_generated);
}

#[test]
fn identical_inputs_give_identical_event_logs() {
    let (trace, cfg) = migrating_run(11);
    let a = run(&trace, &cfg).unwrap();
    let b = run(&trace, &cfg).unwrap();
    assert_eq!(events_jsonl(&a.events), events_jsonl(&b.events));
    assert_eq!(a.report, b.report);
}

#[test]
fn samples_are_conserved_across_migrations() {
    let (trace, cfg) = migrating_run(11);
    let out = run(&trace, &cfg).unwrap();
    assert!(out.report.intra_step_migrations + out.report.inter_step_migrations > 0);
    check_accounting(&trace, &cfg, &out);
}

#[test]
fn every_policy_keeps_accounting_exact() {
    let (trace, base) = migrating_run(5);
    for policy in PolicyKind::ALL {
        let mut cfg = base.clone();
        cfg.sim.policy = policy;
        cfg.sim.history_epochs = 1;
        let out = run(&trace, &cfg).unwrap();
        check_accounting(&trace, &cfg, &out);
    }
}

#[test]
fn step_count_is_checked_against_the_trace() {
    let trace = uniform_trace(8, 2, 2, 10);
    let mut cfg = small_cluster(PolicyKind::Streaming);
    cfg.sim.prompts_per_step = 4;
    cfg.sim.steps = 3;
    assert!(run(&trace, &cfg).is_ok());
    cfg.sim.steps = 5;
    assert!(matches!(run(&trace, &cfg), Err(SimError::Input(_))));
    cfg.sim.steps = 0;
    cfg.sim.history_epochs = 2;
    assert!(matches!(run(&trace, &cfg), Err(SimError::Input(_))));
}

#[test]
fn too_few_prompts_for_the_groups_is_infeasible() {
    let trace = uniform_trace(6, 2, 2, 10);
    let mut cfg = small_cluster(PolicyKind::HistopipeNaive);
    cfg.sim.prompts_per_step = 3;
    assert!(matches!(run(&trace, &cfg), Err(SimError::Infeasible { step: 3, .. })));
}
