use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::NS;
use crate::config::RunConfig;
use crate::spec_engine::SpecCounters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(super) enum Activity {
    Rollout,
    Train,
    Switch,
}

impl Activity {
    fn name(self) -> &'static str {
        match self {
            Activity::Rollout => "rollout",
            Activity::Train => "train",
            Activity::Switch => "switch",
        }
    }
}

/// Time shares of the three pipeline stages; they sum to 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageShares {
    pub rollout: f64,
    pub reward: f64,
    pub train: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub steps: u64,
    pub samples_trained: u64,
    pub makespan_s: f64,
    pub samples_per_second: f64,
    /// Idle share of rollout workers over the whole run.
    pub bubble_fraction: f64,
    pub worker_bubble_fraction: Vec<f64>,
    /// Mean over steps of how long the first rollout worker to finish waits
    /// for the last, relative to the step's rollout duration.
    pub earliest_idle_frac: f64,
    pub stage_shares: StageShares,
    pub migration_pct: f64,
    pub intra_step_migrations: u64,
    pub inter_step_migrations: u64,
    pub speculation_rate: f64,
    pub acceptance_rate: f64,
    pub tokens_generated: u64,
    pub wall_per_10_steps_s: f64,
}

/// One coalesced interval of a worker's timeline, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub worker_id: String,
    pub start: f64,
    pub end: f64,
    pub activity: String,
}

type Span = (u64, u64);

pub(super) struct Recorder {
    rollout: Vec<Vec<(u64, u64, Activity)>>,
    reward: Vec<Vec<(u64, u64, ())>>,
    train: Vec<(u64, u64, ())>,
    /// Colocated training on rollout workers, kept once for stage accounting.
    colocated_train: Vec<Span>,
    starts: BTreeMap<(u64, usize), u64>,
    finishes: BTreeMap<(u64, usize), u64>,
    trained: u64,
    last_train: u64,
    intra: u64,
    inter: u64,
    steps: u64,
}

impl Recorder {
    pub fn new(rollout_workers: usize, reward_workers: usize, steps: u64) -> Self {
        Self {
            rollout: vec![Vec::new(); rollout_workers],
            reward: vec![Vec::new(); reward_workers],
            train: Vec::new(),
            colocated_train: Vec::new(),
            starts: BTreeMap::new(),
            finishes: BTreeMap::new(),
            trained: 0,
            last_train: 0,
            intra: 0,
            inter: 0,
            steps,
        }
    }

    pub fn rollout_busy(&mut self, w: usize, start: u64, end: u64, a: Activity) {
        push_coalesced(&mut self.rollout[w], start, end, a);
    }

    pub fn reward_busy(&mut self, rw: usize, start: u64, end: u64) {
        push_coalesced(&mut self.reward[rw], start, end, ());
    }

    pub fn train_busy(&mut self, start: u64, end: u64) {
        push_coalesced(&mut self.train, start, end, ());
    }

    pub fn stage_train(&mut self, start: u64, end: u64) {
        self.colocated_train.push((start, end));
    }

    pub fn set_start(&mut self, step: u64, w: usize, t: u64) {
        self.starts.insert((step, w), t);
    }

    pub fn finish(&self, step: u64, w: usize) -> Option<u64> {
        self.finishes.get(&(step, w)).copied()
    }

    pub fn set_finish(&mut self, step: u64, w: usize, t: u64) {
        self.finishes.insert((step, w), t);
    }

    pub fn clear_finish(&mut self, step: u64, w: usize) {
        self.finishes.remove(&(step, w));
    }

    pub fn migrated(&mut self, inter_step: bool) {
        if inter_step {
            self.inter += 1;
        } else {
            self.intra += 1;
        }
    }

    pub fn trained(&mut self, samples: usize, t: u64) {
        self.trained += samples as u64;
        self.last_train = self.last_train.max(t);
    }
}

/// Append `[start, end)`, merging with the previous interval when they touch
/// and carry the same tag.
fn push_coalesced<T: PartialEq>(v: &mut Vec<(u64, u64, T)>, start: u64, end: u64, tag: T) {
    if end <= start {
        return;
    }
    if let Some(last) = v.last_mut() {
        if last.1 == start && last.2 == tag {
            last.1 = end;
            return;
        }
    }
    v.push((start, end, tag));
}

fn union_len(mut spans: Vec<Span>) -> u64 {
    spans.sort_unstable();
    let mut total = 0;
    let mut cur: Option<Span> = None;
    for (s, e) in spans {
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    total + cur.map_or(0, |(s, e)| e - s)
}

fn secs(ns: u64) -> f64 {
    ns as f64 / NS
}

/// Timeline rows of one worker: its busy intervals with idle gaps filled in
/// up to `makespan`.
fn worker_rows<T>(
    id: &str,
    spans: &[(u64, u64, T)],
    makespan: u64,
    name: impl Fn(&T) -> &'static str,
) -> Vec<TimelineRow> {
    let mut rows = Vec::new();
    let mut t = 0;
    let row = |s: u64, e: u64, a: &str| TimelineRow {
        worker_id: id.to_owned(),
        start: secs(s),
        end: secs(e),
        activity: a.to_owned(),
    };
    for (s, e, tag) in spans {
        if *s > t {
            rows.push(row(t, *s, "idle"));
        }
        rows.push(row(*s, *e, name(tag)));
        t = *e;
    }
    if makespan > t {
        rows.push(row(t, makespan, "idle"));
    }
    rows
}

pub(super) fn build(
    cfg: &RunConfig,
    rec: Recorder,
    spec: SpecCounters,
    samples: usize,
) -> (MetricsReport, Vec<TimelineRow>) {
    let makespan =
        rec.last_train.max(rec.rollout.iter().filter_map(|v| v.last().map(|x| x.1)).max().unwrap_or(0)).max(1);

    let worker_bubble: Vec<f64> = rec
        .rollout
        .iter()
        .map(|v| {
            let busy: u64 = v.iter().map(|(s, e, _)| e - s).sum();
            (makespan - busy) as f64 / makespan as f64
        })
        .collect();
    let idle_total: u64 = rec.rollout.iter().map(|v| makespan - v.iter().map(|(s, e, _)| e - s).sum::<u64>()).sum();
    let bubble = idle_total as f64 / (makespan as f64 * rec.rollout.len() as f64);

    let mut per_step: BTreeMap<u64, (u64, u64, u64)> = BTreeMap::new();
    for (&(step, w), &start) in &rec.starts {
        let Some(&end) = rec.finishes.get(&(step, w)) else { continue };
        let e = per_step.entry(step).or_insert((u64::MAX, u64::MAX, 0));
        e.0 = e.0.min(start);
        e.1 = e.1.min(end);
        e.2 = e.2.max(end);
    }
    let fracs: Vec<f64> = per_step
        .values()
        .filter(|(s, _, e)| e > s)
        .map(|&(s, first, last)| (last - first) as f64 / (last - s) as f64)
        .collect();
    let earliest_idle = if fracs.is_empty() { 0.0 } else { fracs.iter().sum::<f64>() / fracs.len() as f64 };

    let rollout_spans: Vec<Span> =
        rec.rollout.iter().flat_map(|v| v.iter().filter(|x| x.2 == Activity::Rollout).map(|x| (x.0, x.1))).collect();
    let reward_spans: Vec<Span> = rec.reward.iter().flat_map(|v| v.iter().map(|x| (x.0, x.1))).collect();
    let mut train_spans: Vec<Span> = rec.train.iter().map(|x| (x.0, x.1)).collect();
    train_spans.extend(&rec.colocated_train);
    // The context switch belongs to the train stage.
    train_spans
        .extend(rec.rollout.iter().flat_map(|v| v.iter().filter(|x| x.2 == Activity::Switch).map(|x| (x.0, x.1))));
    let (r, w, t) = (union_len(rollout_spans) as f64, union_len(reward_spans) as f64, union_len(train_spans) as f64);
    let sum = r + w + t;
    let shares = if sum == 0.0 {
        StageShares { rollout: 1.0, reward: 0.0, train: 0.0 }
    } else {
        StageShares { rollout: r / sum, reward: w / sum, train: t / sum }
    };

    let mut timeline = Vec::new();
    for (i, v) in rec.rollout.iter().enumerate() {
        timeline.extend(worker_rows(&format!("rollout-{i}"), v, makespan, |a: &Activity| a.name()));
    }
    for (i, v) in rec.reward.iter().enumerate() {
        timeline.extend(worker_rows(&format!("reward-{i}"), v, makespan, |_| "reward"));
    }
    if cfg.sim.policy != crate::config::PolicyKind::Colocated {
        timeline.extend(worker_rows("train-0", &rec.train, makespan, |_| "train"));
    }

    let makespan_s = secs(makespan);
    let report = MetricsReport {
        policy: cfg.sim.policy.name().to_owned(),
        steps: rec.steps,
        samples_trained: rec.trained,
        makespan_s,
        samples_per_second: rec.trained as f64 / makespan_s,
        bubble_fraction: bubble,
        worker_bubble_fraction: worker_bubble,
        earliest_idle_frac: earliest_idle,
        stage_shares: shares,
        migration_pct: if samples == 0 { 0.0 } else { 100.0 * (rec.intra + rec.inter) as f64 / samples as f64 },
        intra_step_migrations: rec.intra,
        inter_step_migrations: rec.inter,
        speculation_rate: spec.speculation_rate(),
        acceptance_rate: spec.acceptance_rate(),
        tokens_generated: spec.tokens_total,
        wall_per_10_steps_s: makespan_s * 10.0 / rec.steps.max(1) as f64,
    };
    (report, timeline)
}

pub fn timeline_csv(rows: &[TimelineRow]) -> String {
    let mut out = String::from("worker_id,start,end,activity\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{}", r.worker_id, r.start, r.end, r.activity);
    }
    out
}

pub const COMPARE_CSV_HEADER: &str = "label,policy,steps,samples_trained,makespan_s,samples_per_second,\
normalized_throughput,bubble_fraction,earliest_idle_frac,rollout_share,reward_share,train_share,\
migration_pct,speculation_rate,acceptance_rate,wall_per_10_steps_s";

/// Side-by-side comparison of runs. Throughput is normalized to the first run.
pub fn compare_csv(runs: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::from(COMPARE_CSV_HEADER);
    out.push('\n');
    let base = runs.first().map_or(1.0, |(_, r)| r.samples_per_second);
    for (label, r) in runs {
        let norm = if base > 0.0 { r.samples_per_second / base } else { 0.0 };
        let s = &r.stage_shares;
        let _ = writeln!(
            out,
            "{label},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.policy,
            r.steps,
            r.samples_trained,
            r.makespan_s,
            r.samples_per_second,
            norm,
            r.bubble_fraction,
            r.earliest_idle_frac,
            s.rollout,
            s.reward,
            s.train,
            r.migration_pct,
            r.speculation_rate,
            r.acceptance_rate,
            r.wall_per_10_steps_s,
        );
    }
    out
}
