//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rollsim_core::config::{PolicyKind, RunConfig};
use rollsim_core::history_store::Response;
use rollsim_core::scheduler::{plan_allocation, PlanParams};
use rollsim_core::sim::{EventKind, SimOutput};
use rollsim_core::trace::Trace;
use rollsim_core::TokenId;

/// Random corpus of one prompt with rewards that are multiples of 1/8, so
/// every priority sum is exact in floating point.
pub fn random_corpus(rng: &mut impl Rng, max_responses: usize, max_len: usize, vocab: u32) -> Vec<Response> {
    let n = rng.random_range(1..=max_responses);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let tokens = (0..len).map(|_| rng.random_range(0..vocab)).collect();
            let reward = rng.random_range(-8i32..=16) as f64 / 8.0;
            Response::new("p00000", 1, tokens, reward)
        })
        .collect()
}

/// (response, start) of every occurrence of `pattern`.
pub fn occurrences(corpus: &[Response], pattern: &[TokenId]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ri, r) in corpus.iter().enumerate() {
        if pattern.len() > r.tokens.len() {
            continue;
        }
        for j in 0..=r.tokens.len() - pattern.len() {
            if r.tokens[j..j + pattern.len()] == *pattern {
                out.push((ri, j));
            }
        }
    }
    out
}

/// Reward-weighted number of occurrences of `pattern`.
pub fn weighted_count(corpus: &[Response], pattern: &[TokenId]) -> f64 {
    occurrences(corpus, pattern).iter().map(|&(r, _)| corpus[r].reward).sum()
}

/// Greedy draft by direct scanning: extend the matched path one token at a
/// time with the next token of largest reward-weighted count, smallest token
/// on ties. `None` when the prefix never occurs.
pub fn brute_force_draft(corpus: &[Response], prefix: &[TokenId], window: usize) -> Option<Vec<TokenId>> {
    let mut occ = occurrences(corpus, prefix);
    if occ.is_empty() {
        return None;
    }
    let mut depth = prefix.len();
    let mut out = Vec::new();
    while out.len() < window {
        let mut next: BTreeMap<TokenId, f64> = BTreeMap::new();
        for &(r, j) in &occ {
            if let Some(&t) = corpus[r].tokens.get(j + depth) {
                *next.entry(t).or_default() += corpus[r].reward;
            }
        }
        let mut best: Option<(TokenId, f64)> = None;
        for (&t, &w) in &next {
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((t, w));
            }
        }
        let Some((t, _)) = best else { break };
        occ.retain(|&(r, j)| corpus[r].tokens.get(j + depth) == Some(&t));
        out.push(t);
        depth += 1;
    }
    Some(out)
}

/// Smallest slope `d` over every allocation of `min..=max` workers per group
/// with at most `wks` in total, where group `i` must finish by `t0 + i*d`.
/// `tau[i][k]` is group i's time on k workers.
pub fn exhaustive_min_slope(tau: &[Vec<f64>], t0: f64, wks: usize, min: usize, max: usize) -> Option<f64> {
    let n = tau.len();
    let mut alloc = vec![min; n];
    let mut best: Option<f64> = None;
    loop {
        if alloc.iter().sum::<usize>() <= wks && tau[0][alloc[0]] <= t0 {
            let d = (1..n).map(|i| (tau[i][alloc[i]] - t0) / i as f64).fold(0.0, f64::max);
            best = Some(best.map_or(d, |b: f64| b.min(d)));
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            if alloc[i] < max {
                alloc[i] += 1;
                break;
            }
            alloc[i] = min;
            i += 1;
        }
    }
}

/// Allocation problem over a random time table `tau[group][workers]` that is
/// non-increasing in workers and non-decreasing in group.
#[derive(Debug)]
pub struct Instance {
    pub tau: Vec<Vec<f64>>,
    pub wks: usize,
    pub min: usize,
    pub max: usize,
    pub t_train: f64,
    pub precision: f64,
}

pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let n = rng.random_range(2..=5);
    let min = rng.random_range(1..=2);
    let max = rng.random_range(min..=6);
    let wks = rng.random_range(n * min..=20);
    let mut tau: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut t = rng.random_range(10.0..200.0);
        let mut row = vec![0.0; max + 1];
        for k in min..=max {
            if k > min {
                t -= rng.random_range(0.0..t / 2.0);
            }
            row[k] = if i > 0 { f64::max(t, tau[i - 1][k]) } else { t };
        }
        tau.push(row);
    }
    let t_train = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..150.0) };
    let precision = [0.01, 0.5, 1.0, 4.0][rng.random_range(0..4)];
    Instance { tau, wks, min, max, t_train, precision }
}

/// Compare `plan_allocation` with exhaustive search. Returns the slope gap in
/// units of the precision, or `None` when neither finds a plan.
pub fn check_allocation(inst: &Instance) -> Result<Option<f64>, String> {
    let n = inst.tau.len();
    let lens: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let model = |l: f64, k: usize| inst.tau[l as usize][k];
    let params = PlanParams { min_wks: inst.min, max_wks: inst.max, precision: inst.precision };
    let plan = plan_allocation(&lens, inst.wks, inst.t_train, &params, &model).map_err(|e| e.to_string())?;
    let t0 = inst.tau[0][inst.max].max(inst.t_train);
    if plan.t0 != t0 {
        return Err(format!("t0 {} instead of {t0}", plan.t0));
    }
    let Some(best) = exhaustive_min_slope(&inst.tau, t0, inst.wks, inst.min, inst.max) else {
        // Only possible when the shortest group cannot reach t0 within the budget.
        return if plan.feasible { Err("plan found where none exists".into()) } else { Ok(None) };
    };
    if !plan.feasible {
        return Err(format!("no plan, optimum d = {best}"));
    }
    if plan.d < best - 1e-9 || plan.d - best > inst.precision + 1e-9 {
        return Err(format!("d = {} vs optimum {best} (p = {})", plan.d, inst.precision));
    }
    let used: usize = plan.per_group_workers.iter().sum();
    let on_time = plan
        .per_group_workers
        .iter()
        .enumerate()
        .all(|(i, &k)| (inst.min..=inst.max).contains(&k) && inst.tau[i][k] <= t0 + i as f64 * plan.d + 1e-9);
    if used > inst.wks || !on_time {
        return Err(format!("plan {:?} misses a target or the budget", plan.per_group_workers));
    }
    Ok(Some((plan.d - best) / inst.precision))
}

/// Window after a sequence of verify outcomes (`true` = every drafted token
/// accepted): 2 + 2 per trailing full accept, capped at 32.
pub fn aimd_closed_form(outcomes: &[bool]) -> usize {
    let streak = outcomes.iter().rev().take_while(|&&a| a).count();
    (2 + 2 * streak).min(32)
}

/// Assert the conservation, causality, versioning and timeline invariants of a run.
pub fn check_accounting(trace: &Trace, cfg: &RunConfig, out: &SimOutput) {
    let skip: BTreeSet<u32> = trace.epochs().into_iter().take(cfg.sim.history_epochs).collect();
    let eligible: BTreeSet<u64> =
        (0..trace.responses.len() as u64).filter(|&i| !skip.contains(&trace.responses[i as usize].epoch)).collect();
    let simulated: BTreeSet<u64> = if cfg.sim.steps > 0 {
        // A step limit cuts the trace at whole prompts: every finished
        // prompt-epoch group must be complete and their number fixed.
        let done: BTreeSet<u64> =
            out.events.iter().filter(|e| e.kind == EventKind::RolloutFinish).filter_map(|e| e.sample).collect();
        let groups: BTreeSet<(&str, u32)> = done
            .iter()
            .map(|&i| (trace.responses[i as usize].prompt_id.0.as_str(), trace.responses[i as usize].epoch))
            .collect();
        let extra = (cfg.sim.prompts_per_step as f64 * cfg.sim.oversample_pct / 100.0).ceil() as usize;
        assert_eq!(groups.len(), cfg.sim.steps * (cfg.sim.prompts_per_step + extra));
        eligible
            .into_iter()
            .filter(|&i| {
                groups.contains(&(trace.responses[i as usize].prompt_id.0.as_str(), trace.responses[i as usize].epoch))
            })
            .collect()
    } else {
        eligible
    };

    let mut finished: BTreeMap<u64, (u64, u64, Option<u64>)> = BTreeMap::new();
    let mut rewarded: BTreeMap<u64, u64> = BTreeMap::new();
    let mut rewards_by_step: BTreeMap<u64, usize> = BTreeMap::new();
    let mut inter: BTreeMap<u64, u64> = BTreeMap::new();
    let mut last_t = 0;
    for e in &out.events {
        assert!(e.t_ns >= last_t, "event log out of order");
        last_t = e.t_ns;
        match e.kind {
            EventKind::RolloutFinish => {
                let id = e.sample.unwrap();
                assert!(finished.insert(id, (e.t_ns, e.step, e.weight_version)).is_none(), "{id} finished twice");
            }
            EventKind::RewardDone => {
                let id = e.sample.unwrap();
                let (t, step, _) = finished[&id];
                assert!(e.t_ns >= t);
                assert_eq!(e.step, step);
                assert!(rewarded.insert(id, e.t_ns).is_none(), "{id} rewarded twice");
                *rewards_by_step.entry(e.step).or_default() += 1;
            }
            EventKind::TrainDone => {
                let done = rewards_by_step.get(&e.step).copied().unwrap_or(0);
                let step_total = finished.values().filter(|f| f.1 == e.step).count();
                assert_eq!(done, step_total, "train of step {} before all its rewards", e.step);
            }
            EventKind::Migration if e.detail.as_deref().is_some_and(|d| d.starts_with("inter_step")) => {
                assert!(inter.insert(e.sample.unwrap(), e.step).is_none(), "migrated twice");
            }
            _ => {}
        }
    }
    let ids: BTreeSet<u64> = finished.keys().copied().collect();
    assert_eq!(ids, simulated, "rollouts lost or invented");
    assert_eq!(rewarded.len(), simulated.len());
    assert_eq!(out.report.samples_trained as usize, simulated.len());

    for (id, (_, step, version)) in &finished {
        if let Some(from) = inter.get(id) {
            assert_eq!(*step, from + 1, "inter-step continuation of {id} lands in the next step");
        }
        let expected = match cfg.sim.policy {
            PolicyKind::Colocated => step - 1,
            _ => step.saturating_sub(2),
        };
        assert_eq!(*version, Some(expected), "sample {id} of step {step}");
    }

    let makespan = out.report.makespan_s;
    let mut by_worker: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &out.timeline {
        by_worker.entry(&r.worker_id).or_default().push((r.start, r.end));
    }
    for (w, rows) in by_worker {
        assert_eq!(rows[0].0, 0.0, "{w}");
        for pair in rows.windows(2) {
            assert_eq!(pair[0].1, pair[1].0, "{w} has a gap or overlap");
        }
        assert_eq!(rows.last().unwrap().1, makespan, "{w}");
    }
    let s = out.report.stage_shares;
    assert!((s.rollout + s.reward + s.train - 1.0).abs() < 1e-3);
    assert!((0.0..=1.0).contains(&out.report.bubble_fraction));
}
