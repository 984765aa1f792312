//! Synthetic multi-epoch rollout traces and the metrics computed on them.
//!
//! A trace is a flat list of [`Response`]s, stored as JSONL with one response
//! per line. [`generate`] produces traces whose token similarity between
//! consecutive epochs and whose per-prompt length ranks are both tunable.

mod analysis;
mod generate;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analysis::{rank_metrics, rank_metrics_mean, token_similarity_replay, RankMetrics, ReplayStats};
pub use generate::generate;

use crate::history_store::{HistoryError, PromptId, Response};
use crate::scheduler::PromptHistory;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid trace spec: {0}")]
    InvalidSpec(String),
    #[error("epoch {0} is not present in the trace")]
    MissingEpoch(u32),
    #[error("trace line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    History(#[from] HistoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

/// Per-epoch multiplier applied to every prompt's median length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowthParams {
    /// Median multiplier per epoch.
    pub mean: f64,
    /// Log-space spread of the multiplier, drawn once per epoch.
    pub sigma: f64,
}

impl Default for GrowthParams {
    fn default() -> Self {
        Self { mean: 1.0, sigma: 0.0 }
    }
}

/// Parameters of a synthetic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    pub num_prompts: usize,
    #[serde(default = "defaults::group_size")]
    pub group_size: usize,
    pub epochs: u32,
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: u32,
    /// Marginal distribution of response lengths in the first epoch.
    pub base_len: LogNormalParams,
    /// Share of log-length variance that is within a prompt's group rather
    /// than between prompts.
    #[serde(default = "defaults::within_prompt_share")]
    pub within_prompt_share: f64,
    #[serde(default = "defaults::max_len")]
    pub max_len: u32,
    /// Probability that a token is copied from the previous epoch's
    /// canonical response.
    pub similarity: f64,
    /// Added to `similarity` each epoch after the first, clamped to [0, 1].
    #[serde(default)]
    pub similarity_step: f64,
    /// Mean length of a mutation burst.
    #[serde(default = "defaults::burst_mean")]
    pub burst_mean: f64,
    #[serde(default)]
    pub length_growth: GrowthParams,
    /// Epoch-to-epoch correlation of a prompt's latent length rank.
    #[serde(default = "defaults::rank_correlation", alias = "rank_noise")]
    pub rank_correlation: f64,
    #[serde(default = "defaults::high_reward_fraction")]
    pub high_reward_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn group_size() -> usize {
        16
    }
    pub fn vocab_size() -> u32 {
        32768
    }
    pub fn within_prompt_share() -> f64 {
        0.05
    }
    pub fn max_len() -> u32 {
        32768
    }
    pub fn burst_mean() -> f64 {
        4.0
    }
    pub fn rank_correlation() -> f64 {
        0.95
    }
    pub fn high_reward_fraction() -> f64 {
        0.5
    }
}

impl TraceSpec {
    /// Defaults for everything but the required shape parameters.
    pub fn new(num_prompts: usize, epochs: u32, base_len: LogNormalParams, similarity: f64) -> Self {
        Self {
            num_prompts,
            group_size: defaults::group_size(),
            epochs,
            vocab_size: defaults::vocab_size(),
            base_len,
            within_prompt_share: defaults::within_prompt_share(),
            max_len: defaults::max_len(),
            similarity,
            similarity_step: 0.0,
            burst_mean: defaults::burst_mean(),
            length_growth: GrowthParams::default(),
            rank_correlation: defaults::rank_correlation(),
            high_reward_fraction: defaults::high_reward_fraction(),
            seed: 0,
        }
    }

    /// Math-reasoning-like workload: highly repetitive tokens, stable length ranks.
    pub fn math_like(num_prompts: usize, epochs: u32, seed: u64) -> Self {
        Self {
            seed,
            within_prompt_share: 0.02,
            rank_correlation: 0.995,
            ..Self::new(num_prompts, epochs, LogNormalParams { mu: 1500f64.ln(), sigma: 0.8 }, 0.93)
        }
    }

    /// Rank stability comparable to the per-task measurements of length
    /// groups between consecutive epochs.
    pub fn table2_like(num_prompts: usize, epochs: u32, seed: u64) -> Self {
        Self {
            seed,
            within_prompt_share: 0.04,
            rank_correlation: 0.95,
            ..Self::new(num_prompts, epochs, LogNormalParams { mu: 1500f64.ln(), sigma: 0.8 }, 0.93)
        }
    }

    /// Heavy-tailed response lengths for pipeline simulation.
    pub fn long_tail(num_prompts: usize, epochs: u32, seed: u64) -> Self {
        Self {
            seed,
            within_prompt_share: 0.04,
            rank_correlation: 0.95,
            max_len: 16384,
            ..Self::new(num_prompts, epochs, LogNormalParams { mu: 2000f64.ln(), sigma: 1.0 }, 0.8)
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::InvalidSpec(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.num_prompts == 0 || self.group_size == 0 || self.epochs == 0 {
            return bad("num_prompts, group_size and epochs must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        if !self.base_len.mu.is_finite() || !self.base_len.sigma.is_finite() || self.base_len.sigma < 0.0 {
            return bad(format!("bad length distribution mu={} sigma={}", self.base_len.mu, self.base_len.sigma));
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if !unit(self.similarity) || !unit(self.rank_correlation) || !unit(self.within_prompt_share) {
            return bad("similarity, rank_correlation and within_prompt_share must lie in [0, 1]".into());
        }
        if !unit(self.high_reward_fraction) {
            return bad("high_reward_fraction must lie in [0, 1]".into());
        }
        if !self.similarity_step.is_finite() {
            return bad("similarity_step must be finite".into());
        }
        if !(self.burst_mean >= 1.0 && self.burst_mean.is_finite()) {
            return bad(format!("burst_mean {} must be at least 1", self.burst_mean));
        }
        let g = self.length_growth;
        if !(g.mean > 0.0 && g.mean.is_finite() && g.sigma >= 0.0 && g.sigma.is_finite()) {
            return bad(format!("bad length growth mean={} sigma={}", g.mean, g.sigma));
        }
        Ok(())
    }

    pub fn similarity_at(&self, epoch: u32) -> f64 {
        (self.similarity + self.similarity_step * (epoch.saturating_sub(1)) as f64).clamp(0.0, 1.0)
    }
}

/// An in-memory trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub responses: Vec<Response>,
}

impl Trace {
    pub fn new(responses: Vec<Response>) -> Self {
        Self { responses }
    }

    /// Distinct epochs in ascending order.
    pub fn epochs(&self) -> Vec<u32> {
        let mut e: Vec<u32> = self.responses.iter().map(|r| r.epoch).collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Responses of one epoch grouped by prompt, keeping trace order within a group.
    pub fn by_prompt(&self, epoch: u32) -> Result<BTreeMap<PromptId, Vec<&Response>>, TraceError> {
        let mut out: BTreeMap<PromptId, Vec<&Response>> = BTreeMap::new();
        for r in self.responses.iter().filter(|r| r.epoch == epoch) {
            out.entry(r.prompt_id.clone()).or_default().push(r);
        }
        if out.is_empty() {
            return Err(TraceError::MissingEpoch(epoch));
        }
        Ok(out)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        for r in &self.responses {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut responses = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let resp = serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: i + 1, source })?;
            responses.push(resp);
        }
        Ok(Self { responses })
    }
}

/// Median of a non-empty list of lengths; the mean of the two middle values
/// for even counts.
pub fn median_len(lens: &mut [usize]) -> f64 {
    assert!(!lens.is_empty(), "median of empty list");
    lens.sort_unstable();
    let n = lens.len();
    if n % 2 == 1 {
        lens[n / 2] as f64
    } else {
        (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0
    }
}

/// Per-prompt median and maximum response length of one epoch, in prompt order.
pub fn prompt_history(trace: &Trace, epoch: u32) -> Result<Vec<PromptHistory>, TraceError> {
    Ok(trace
        .by_prompt(epoch)?
        .into_iter()
        .map(|(p, rs)| {
            let mut lens: Vec<usize> = rs.iter().map(|r| r.generated_len()).collect();
            let median = median_len(&mut lens);
            PromptHistory { prompt_id: p, median_len: median, max_len: lens[lens.len() - 1] as f64 }
        })
        .collect())
}
