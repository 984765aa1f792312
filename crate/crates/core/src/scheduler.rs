//! Length-aware rollout scheduling: ranking groups, alternating group-to-slot
//! assignment, unequal worker allocation and long-tail migration decisions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostModel;
use crate::history_store::PromptId;

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("need at least 2 ranking groups, got {0}")]
    TooFewGroups(usize),
    #[error("{prompts} prompts cannot fill {groups} ranking groups")]
    TooFewPrompts { prompts: usize, groups: usize },
    #[error("{wks} workers cannot give {groups} groups {min_wks} worker(s) each")]
    TooFewWorkers { wks: usize, groups: usize, min_wks: usize },
    #[error("invalid worker bounds {min_wks}..={max_wks}")]
    WorkerBounds { min_wks: usize, max_wks: usize },
}

/// Sizes of `groups` consecutive equal chunks of `n` items; the remainder
/// goes one each to the last (longest) chunks.
pub fn group_sizes(n: usize, groups: usize) -> Vec<usize> {
    let base = n / groups;
    let extra = n % groups;
    (0..groups).map(|g| base + usize::from(g >= groups - extra)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingGroup {
    pub index: usize,
    pub prompt_ids: Vec<PromptId>,
    /// Mean of the members' historical median lengths.
    pub representative_len: f64,
    /// Longest historical response among the members.
    pub max_hist_len: f64,
    pub assigned_workers: usize,
}

/// Length summary of one prompt's previous-epoch responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptHistory {
    pub prompt_id: PromptId,
    pub median_len: f64,
    pub max_len: f64,
}

impl PromptHistory {
    pub fn new(prompt_id: impl Into<PromptId>, median_len: f64, max_len: f64) -> Self {
        Self { prompt_id: prompt_id.into(), median_len, max_len }
    }
}

/// Sort prompts by historical median (ties by prompt id) and cut them into
/// `n` equal groups, shortest first.
pub fn build_groups(history: &[PromptHistory], n: usize) -> Result<Vec<RankingGroup>, SchedError> {
    if n < 2 {
        return Err(SchedError::TooFewGroups(n));
    }
    if history.len() < n {
        return Err(SchedError::TooFewPrompts { prompts: history.len(), groups: n });
    }
    let mut sorted: Vec<&PromptHistory> = history.iter().collect();
    sorted.sort_by(|a, b| a.median_len.total_cmp(&b.median_len).then_with(|| a.prompt_id.cmp(&b.prompt_id)));
    let mut it = sorted.into_iter();
    Ok(group_sizes(history.len(), n)
        .into_iter()
        .enumerate()
        .map(|(index, size)| {
            let members: Vec<&PromptHistory> = it.by_ref().take(size).collect();
            RankingGroup {
                index,
                prompt_ids: members.iter().map(|m| m.prompt_id.clone()).collect(),
                representative_len: members.iter().map(|m| m.median_len).sum::<f64>() / size as f64,
                max_hist_len: members.iter().map(|m| m.max_len).fold(f64::NEG_INFINITY, f64::max),
                assigned_workers: 0,
            }
        })
        .collect())
}

/// Group index served by each worker slot at `step` (1-based): ascending on
/// odd steps, descending on even steps.
pub fn assignment_order(step: u64, n: usize) -> Vec<usize> {
    if step % 2 == 1 {
        (0..n).collect()
    } else {
        (0..n).rev().collect()
    }
}

/// Worker-count bounds and search precision for allocation planning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    pub min_wks: usize,
    pub max_wks: usize,
    pub precision: f64,
}

impl PlanParams {
    /// Defaults: at least one worker per group, at most what is left after
    /// every other group gets one.
    pub fn defaults_for(wks: usize, groups: usize) -> Self {
        Self { min_wks: 1, max_wks: (wks + 1).saturating_sub(groups).max(1), precision: 1.0 }
    }
}

/// Workers needed to finish group `i` by `t0 + i * d`, or `None` if some group
/// cannot make its target even with `max_wks` workers.
pub fn cal_wks(
    d: f64,
    lens: &[f64],
    t0: f64,
    params: &PlanParams,
    model: &impl CostModel,
) -> Option<(usize, Vec<usize>)> {
    let mut needed = 0;
    let mut plan = Vec::with_capacity(lens.len());
    for (i, &len) in lens.iter().enumerate() {
        let target = t0 + i as f64 * d;
        let k = (params.min_wks..=params.max_wks).find(|&k| model.tau(len, k) <= target)?;
        needed += k;
        plan.push(k);
    }
    Some((needed, plan))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub t0: f64,
    pub d: f64,
    pub per_group_workers: Vec<usize>,
    pub feasible: bool,
}

impl AllocationPlan {
    /// Predicted finish time of each group under `model`.
    pub fn predicted_times(&self, lens: &[f64], model: &impl CostModel) -> Vec<f64> {
        lens.iter().zip(&self.per_group_workers).map(|(&l, &k)| model.tau(l, k)).collect()
    }
}

/// Choose per-group worker counts whose finish times follow the line
/// `t0 + i * d` with the smallest slope `d` the worker budget allows.
///
/// `lens` are representative lengths in ascending order. The search starts on
/// `[0, (tau(lens[N-1], MIN) - t0) / (N - 1)]`; if that upper end is already
/// over budget it widens to the slope at which every group fits on `min_wks`
/// workers.
pub fn plan_allocation(
    lens: &[f64],
    wks: usize,
    t_train: f64,
    params: &PlanParams,
    model: &impl CostModel,
) -> Result<AllocationPlan, SchedError> {
    let n = lens.len();
    if n < 2 {
        return Err(SchedError::TooFewGroups(n));
    }
    if params.min_wks == 0 || params.min_wks > params.max_wks {
        return Err(SchedError::WorkerBounds { min_wks: params.min_wks, max_wks: params.max_wks });
    }
    if wks < n * params.min_wks {
        return Err(SchedError::TooFewWorkers { wks, groups: n, min_wks: params.min_wks });
    }
    let t0 = model.tau(lens[0], params.max_wks).max(t_train);
    let fits = |d: f64| cal_wks(d, lens, t0, params, model).filter(|(needed, _)| *needed <= wks);

    let mut d_max = ((model.tau(lens[n - 1], params.min_wks) - t0) / (n - 1) as f64).max(0.0);
    let mut best = fits(d_max);
    if best.is_none() {
        d_max = lens
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &l)| (model.tau(l, params.min_wks) - t0) / i as f64)
            .fold(d_max, f64::max);
        // t0 + i * d can round to just below tau; step up until the bound holds.
        for _ in 0..8 {
            best = fits(d_max);
            if best.is_some() {
                break;
            }
            d_max = d_max.next_up();
        }
    }
    let Some((_, mut plan)) = best else {
        return Ok(AllocationPlan { t0, d: d_max, per_group_workers: Vec::new(), feasible: false });
    };
    let mut d_min = 0.0;
    while d_max - d_min > params.precision {
        let mid = (d_max + d_min) / 2.0;
        match fits(mid) {
            Some((_, p)) => {
                plan = p;
                d_max = mid;
            }
            None => d_min = mid,
        }
    }
    Ok(AllocationPlan { t0, d: d_max, per_group_workers: plan, feasible: true })
}

/// Hand out workers left over by a plan, one at a time, to the group whose
/// predicted time drops the most; ties go to the longer group.
pub fn distribute_spare(plan: &mut [usize], lens: &[f64], wks: usize, max_wks: usize, model: &impl CostModel) {
    let mut spare = wks.saturating_sub(plan.iter().sum());
    while spare > 0 {
        let best = (0..plan.len())
            .filter(|&i| plan[i] < max_wks)
            .map(|i| (i, model.tau(lens[i], plan[i]) - model.tau(lens[i], plan[i] + 1)))
            .fold(None::<(usize, f64)>, |acc, (i, gain)| match acc {
                Some((_, g)) if g > gain => acc,
                _ => Some((i, gain)),
            });
        let Some((i, _)) = best else { break };
        plan[i] += 1;
        spare -= 1;
    }
}

/// Thresholds for moving long-tail rollouts out of their group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MigrationPolicy {
    /// Only the last `alpha` percent of a group's rollouts may migrate.
    pub alpha: f64,
    /// Length multiple of the group's longest historical response that marks an outlier.
    pub beta: f64,
    pub beta_floor: f64,
    pub percentile: f64,
}

impl Default for MigrationPolicy {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 1.1, beta_floor: 1.1, percentile: 75.0 }
    }
}

/// Nearest-rank percentile of the previous epoch's length growth rates,
/// floored at `floor`. An empty list yields `floor`.
pub fn beta_from_history(rates: &[f64], percentile: f64, floor: f64) -> f64 {
    let mut v: Vec<f64> = rates.iter().copied().filter(|r| r.is_finite()).collect();
    if v.is_empty() {
        return floor;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1].max(floor)
}

/// Progress of one ranking group within the current step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupProgress {
    pub index: usize,
    pub num_groups: usize,
    pub total: usize,
    pub completed: usize,
    pub max_hist_len: f64,
}

/// Another group still rolling out in the same step, with its current load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveGroup {
    pub index: usize,
    pub load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MigrationDecision {
    None,
    IntraStep { target_group: usize },
    InterStep,
}

/// Decide whether an in-flight rollout with `generated_len` tokens migrates.
///
/// Both conditions must hold: the group is within its last `alpha` percent of
/// unfinished rollouts, and the rollout already exceeds `beta` times the
/// group's longest historical response. Shorter groups (index < N/2) move the
/// rollout to the least-loaded other active group; longer groups, or short
/// ones with nowhere to go, defer it to the next step.
pub fn migration_decision(
    group: &GroupProgress,
    generated_len: usize,
    policy: &MigrationPolicy,
    active: &[ActiveGroup],
) -> MigrationDecision {
    let remaining = group.total.saturating_sub(group.completed);
    let in_tail = remaining as f64 <= policy.alpha / 100.0 * group.total as f64;
    let outlier = generated_len as f64 > policy.beta * group.max_hist_len;
    if !(in_tail && outlier) {
        return MigrationDecision::None;
    }
    if group.index < group.num_groups / 2 {
        let target = active
            .iter()
            .filter(|g| g.index != group.index)
            .min_by(|a, b| a.load.total_cmp(&b.load).then(a.index.cmp(&b.index)));
        if let Some(t) = target {
            return MigrationDecision::IntraStep { target_group: t.index };
        }
    }
    MigrationDecision::InterStep
}
