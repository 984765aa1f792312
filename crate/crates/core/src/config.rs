//! Run configuration loaded from TOML. Every key has a default; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::AnalyticCost;
use crate::scheduler::MigrationPolicy;
use crate::spec_engine::SpecConfig;

pub const SEED_ENV: &str = "RHYME_SIM_SEED";
pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
    #[error("config: cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Rollout and training alternate on the same workers.
    Colocated,
    /// Dedicated rollout and train workers, steps separated by a global barrier.
    Streaming,
    /// Ranking groups with alternating placement, equal workers per group.
    HistopipeNaive,
    /// Ranking groups with alternating placement and planned worker counts.
    HistopipeTwoTier,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] =
        [PolicyKind::Colocated, PolicyKind::Streaming, PolicyKind::HistopipeNaive, PolicyKind::HistopipeTwoTier];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Colocated => "colocated",
            PolicyKind::Streaming => "streaming",
            PolicyKind::HistopipeNaive => "histopipe_naive",
            PolicyKind::HistopipeTwoTier => "histopipe_two_tier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn uses_groups(self) -> bool {
        matches!(self, PolicyKind::HistopipeNaive | PolicyKind::HistopipeTwoTier)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub rollout_workers: usize,
    pub reward_workers: usize,
    pub n_groups: usize,
    /// Sequences decoded concurrently per rollout worker.
    pub max_batch: usize,
    /// Seconds from the end of a train step until its weights reach rollout workers.
    pub weight_propagation_delay: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { rollout_workers: 16, reward_workers: 4, n_groups: 8, max_batch: 256, weight_propagation_delay: 2.0 }
    }
}

/// Durations, in seconds, that drive the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Fixed cost of one decode iteration on a worker.
    pub iter_base: f64,
    /// Per-sequence cost of one iteration (attention over the sequence's cache).
    pub iter_per_seq: f64,
    /// Per-token cost of one iteration, counting verified draft tokens.
    pub iter_per_token: f64,
    /// Prefill cost per token, charged when a sequence starts or resumes after migration.
    pub prefill_per_token: f64,
    pub prompt_len: usize,
    pub reward_per_sample: f64,
    pub train_fixed: f64,
    pub train_per_sample: f64,
    /// Mini-batches per train step; each starts once enough rewarded samples exist.
    pub train_minibatches: usize,
    /// Colocated only: switching from training back to rollout, as a fraction of train time.
    pub context_switch_frac: f64,
    /// Optional `len,dp,seconds` profile used for allocation planning.
    pub profile: Option<PathBuf>,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            iter_base: 0.005,
            iter_per_seq: 1.0e-3,
            iter_per_token: 2.0e-5,
            prefill_per_token: 2.0e-5,
            prompt_len: 512,
            reward_per_sample: 0.01,
            train_fixed: 10.0,
            train_per_sample: 0.05,
            train_minibatches: 4,
            context_switch_frac: 0.05,
            profile: None,
        }
    }
}

impl CostConfig {
    /// Execution time of `len`-token decoding for a group of `group_samples`
    /// sequences spread over `dp` workers, as a planning model.
    pub fn planning_model(&self, group_samples: usize, accepted_per_pass: f64) -> AnalyticCost {
        AnalyticCost {
            a: self.iter_base,
            b: self.iter_per_seq + self.iter_per_token * (1.0 + accepted_per_pass),
            c: self.prefill_per_token * self.prompt_len as f64,
            batch: group_samples,
            accepted_per_pass,
        }
    }

    pub fn train_time(&self, samples: usize) -> f64 {
        self.train_fixed + self.train_per_sample * samples as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub policy: PolicyKind,
    /// Number of steps to simulate; 0 runs every step the trace provides.
    pub steps: usize,
    pub prompts_per_step: usize,
    /// Extra prompts scheduled per step, as a percentage of `prompts_per_step`.
    pub oversample_pct: f64,
    pub seed: u64,
    /// Leading trace epochs that are not simulated and only seed history.
    pub history_epochs: usize,
    pub plan_precision: f64,
    pub min_wks: usize,
    /// 0 selects `rollout_workers - (n_groups - 1)`.
    pub max_wks: usize,
    pub migration_enabled: bool,
    pub migration: MigrationPolicy,
    pub event_log: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::HistopipeTwoTier,
            steps: 0,
            prompts_per_step: 64,
            oversample_pct: 0.0,
            seed: 0,
            history_epochs: 0,
            plan_precision: 1.0,
            min_wks: 1,
            max_wks: 0,
            migration_enabled: true,
            migration: MigrationPolicy::default(),
            event_log: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub spec: SpecConfig,
    pub cluster: ClusterConfig,
    pub cost: CostConfig,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(p) = &cfg.cost.profile {
            if p.is_relative() {
                cfg.cost.profile = Some(path.parent().unwrap_or(Path::new(".")).join(p));
            }
        }
        Ok(cfg)
    }

    /// Apply the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.sim.seed =
                v.trim().parse().map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        self.spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let c = &self.cluster;
        if c.rollout_workers == 0 || c.reward_workers == 0 || c.max_batch == 0 {
            return bad("cluster.rollout_workers, reward_workers and max_batch must be at least 1");
        }
        if self.sim.policy.uses_groups() {
            if c.n_groups < 2 {
                return bad("cluster.n_groups must be at least 2 for histopipe policies");
            }
            if c.rollout_workers < c.n_groups * self.sim.min_wks.max(1) {
                return bad("cluster.rollout_workers must cover n_groups * sim.min_wks");
            }
        }
        let k = &self.cost;
        let non_neg = [
            k.iter_base,
            k.iter_per_seq,
            k.iter_per_token,
            k.prefill_per_token,
            k.reward_per_sample,
            k.train_fixed,
            k.train_per_sample,
            k.context_switch_frac,
            c.weight_propagation_delay,
        ];
        if non_neg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("cost and delay values must be finite and non-negative");
        }
        if k.iter_base + k.iter_per_seq + k.iter_per_token <= 0.0 {
            return bad("decode iterations must take positive time");
        }
        if k.train_minibatches == 0 {
            return bad("cost.train_minibatches must be at least 1");
        }
        let s = &self.sim;
        if s.prompts_per_step == 0 {
            return bad("sim.prompts_per_step must be at least 1");
        }
        if !(s.oversample_pct.is_finite() && s.oversample_pct >= 0.0) {
            return bad("sim.oversample_pct must be non-negative");
        }
        if !(s.plan_precision.is_finite() && s.plan_precision > 0.0) {
            return bad("sim.plan_precision must be positive");
        }
        if s.min_wks == 0 || (s.max_wks != 0 && s.max_wks < s.min_wks) {
            return bad("sim.min_wks must be at least 1 and no larger than sim.max_wks");
        }
        let m = &s.migration;
        if !(m.alpha > 0.0 && m.alpha < 100.0) || !(m.percentile > 0.0 && m.percentile <= 100.0) {
            return bad("sim.migration.alpha must lie in (0, 100) and percentile in (0, 100]");
        }
        if !(m.beta_floor.is_finite() && m.beta >= m.beta_floor) {
            return bad("sim.migration.beta must be at least beta_floor");
        }
        Ok(())
    }

    /// Every configuration key with its default value, one per line.
    pub fn documented_keys() -> Vec<(String, String)> {
        let value = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out.push(("cost.profile".into(), "(unset)".into()));
        out.sort();
        out
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_owned(), other.to_string())),
    }
}
