use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::{prompt_history, Trace, TraceError};
use crate::history_store::{PromptId, Response, SuffixTree};
use crate::scheduler::group_sizes;

/// Share of long-predicted responses whose realized length lands in each
/// rank-stability category. The four percentages partition the responses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RankMetrics {
    /// Realized group is at or below the predicted group.
    pub accurate_pct: f64,
    /// Moved to a higher group but not among the longest 10% of its predicted group.
    pub not_last_10_pct: f64,
    /// Among the longest 10% but no longer than 1.1x the group's longest historical response.
    pub within_1p1x_pct: f64,
    /// Everything else: candidates for migration.
    pub migrated_pct: f64,
    pub responses: usize,
}

const TAIL_SHARE: f64 = 0.10;
const LENGTH_SLACK: f64 = 1.1;

/// Compare the rank groups predicted from `prev` medians with the groups the
/// `cur` responses actually fall into.
pub fn rank_metrics(trace: &Trace, (prev, cur): (u32, u32), num_groups: usize) -> Result<RankMetrics, TraceError> {
    if num_groups == 0 {
        return Err(TraceError::InvalidSpec("num_groups must be at least 1".into()));
    }
    let history = prompt_history(trace, prev)?;
    let current = trace.by_prompt(cur)?;

    let mut prompts: Vec<_> = history.iter().filter(|h| current.contains_key(&h.prompt_id)).collect();
    prompts.sort_by(|a, b| a.median_len.total_cmp(&b.median_len).then_with(|| a.prompt_id.cmp(&b.prompt_id)));

    let mut predicted: BTreeMap<&PromptId, usize> = BTreeMap::new();
    let mut max_hist = vec![0.0f64; num_groups];
    let mut it = prompts.iter();
    for (g, size) in group_sizes(prompts.len(), num_groups).into_iter().enumerate() {
        for h in it.by_ref().take(size) {
            predicted.insert(&h.prompt_id, g);
            max_hist[g] = max_hist[g].max(h.max_len);
        }
    }

    // (prompt, index within group, length, predicted group)
    let mut samples: Vec<(&PromptId, usize, usize, usize)> = Vec::new();
    for (p, &g) in &predicted {
        for (i, r) in current[*p].iter().enumerate() {
            samples.push((p, i, r.generated_len(), g));
        }
    }
    let n = samples.len();
    if n == 0 {
        return Ok(RankMetrics::default());
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&samples[a], &samples[b]);
        sa.2.cmp(&sb.2).then_with(|| sa.0.cmp(sb.0)).then(sa.1.cmp(&sb.1))
    });
    let mut real = vec![0usize; n];
    let mut pos = 0;
    for (g, size) in group_sizes(n, num_groups).into_iter().enumerate() {
        for &k in &order[pos..pos + size] {
            real[k] = g;
        }
        pos += size;
    }

    // Length at which a response joins the longest 10% of its predicted group.
    let mut tail_cut = vec![usize::MAX; num_groups];
    for (g, cut) in tail_cut.iter_mut().enumerate() {
        let mut lens: Vec<usize> = samples.iter().filter(|s| s.3 == g).map(|s| s.2).collect();
        if lens.is_empty() {
            continue;
        }
        lens.sort_unstable_by(|a, b| b.cmp(a));
        let k = ((lens.len() as f64 * TAIL_SHARE).ceil() as usize).max(1);
        *cut = lens[k - 1];
    }

    let mut counts = [0usize; 4];
    for (k, &(_, _, len, g)) in samples.iter().enumerate() {
        let cat = if real[k] <= g {
            0
        } else if len < tail_cut[g] {
            1
        } else if len as f64 <= LENGTH_SLACK * max_hist[g] {
            2
        } else {
            3
        };
        counts[cat] += 1;
    }
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    Ok(RankMetrics {
        accurate_pct: pct(counts[0]),
        not_last_10_pct: pct(counts[1]),
        within_1p1x_pct: pct(counts[2]),
        migrated_pct: pct(counts[3]),
        responses: n,
    })
}

/// Mean of [`rank_metrics`] over every consecutive epoch pair of the trace.
pub fn rank_metrics_mean(trace: &Trace, num_groups: usize) -> Result<RankMetrics, TraceError> {
    let epochs = trace.epochs();
    let per: Vec<RankMetrics> =
        epochs.windows(2).map(|w| rank_metrics(trace, (w[0], w[1]), num_groups)).collect::<Result<_, _>>()?;
    if per.is_empty() {
        return Err(TraceError::MissingEpoch(epochs.first().map_or(0, |e| e + 1)));
    }
    let k = per.len() as f64;
    Ok(RankMetrics {
        accurate_pct: per.iter().map(|m| m.accurate_pct).sum::<f64>() / k,
        not_last_10_pct: per.iter().map(|m| m.not_last_10_pct).sum::<f64>() / k,
        within_1p1x_pct: per.iter().map(|m| m.within_1p1x_pct).sum::<f64>() / k,
        migrated_pct: per.iter().map(|m| m.migrated_pct).sum::<f64>() / k,
        responses: per.iter().map(|m| m.responses).sum(),
    })
}

/// Token counts from replaying one epoch against the previous one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReplayStats {
    pub accepted: u64,
    pub total: u64,
    /// Tokens generated before a full lookup prefix existed.
    pub warmup: u64,
}

impl ReplayStats {
    pub fn acceptance(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.accepted as f64 / self.total as f64
        }
    }

    pub fn acceptance_after_warmup(&self) -> f64 {
        let denom = self.total - self.warmup;
        if denom == 0 {
            0.0
        } else {
            self.accepted as f64 / denom as f64
        }
    }

    fn add(self, o: Self) -> Self {
        Self { accepted: self.accepted + o.accepted, total: self.total + o.total, warmup: self.warmup + o.warmup }
    }
}

/// Replay every `cur` response token by token: once `prefix_len` tokens
/// exist, look the last `prefix_len` up among the same prompt's `prev`
/// responses; if found, the longest identical continuation is accepted and
/// skipped over, otherwise one token is generated normally.
pub fn token_similarity_replay(
    trace: &Trace,
    (prev, cur): (u32, u32),
    prefix_len: usize,
) -> Result<ReplayStats, TraceError> {
    if prefix_len == 0 {
        return Err(TraceError::InvalidSpec("prefix_len must be at least 1".into()));
    }
    let history = trace.by_prompt(prev)?;
    let current = trace.by_prompt(cur)?;
    let work: Vec<(&PromptId, &Vec<&Response>)> = current.iter().collect();
    let parts = work
        .par_iter()
        .map(|(p, rs)| {
            let tree = match history.get(*p) {
                Some(h) => {
                    let owned: Vec<Response> = h.iter().map(|r| (*r).clone()).collect();
                    Some(SuffixTree::build((*p).clone(), prev, &owned)?)
                }
                None => None,
            };
            Ok(rs
                .iter()
                .fold(ReplayStats::default(), |acc, r| acc.add(replay_one(tree.as_ref(), &r.tokens, prefix_len))))
        })
        .collect::<Result<Vec<_>, TraceError>>()?;
    Ok(parts.into_iter().fold(ReplayStats::default(), ReplayStats::add))
}

fn replay_one(tree: Option<&SuffixTree>, truth: &[u32], k: usize) -> ReplayStats {
    let total = truth.len() as u64;
    let warmup = total.min(k as u64);
    let Some(tree) = tree else {
        return ReplayStats { accepted: 0, total, warmup };
    };
    let mut accepted = 0u64;
    let mut pos = k.min(truth.len());
    while pos < truth.len() {
        let m = tree.longest_match(&truth[pos - k..]);
        let gained = m.saturating_sub(k);
        if gained > 0 {
            accepted += gained as u64;
            pos += gained;
        } else {
            pos += 1;
        }
    }
    ReplayStats { accepted, total, warmup }
}
