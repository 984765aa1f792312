//! Deterministic discrete-event simulation of the rollout → reward → train
//! pipeline.
//!
//! Rollout workers decode their sequences in continuous-batching iterations
//! whose duration comes from the [`CostConfig`](crate::config::CostConfig)
//! iteration model; speculative decoding is replayed token by token against
//! the true responses of the trace. Time is kept in integer nanoseconds so
//! busy and idle accounting is exact.

mod engine;
mod metrics;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use engine::run;
pub use metrics::{compare_csv, timeline_csv, MetricsReport, StageShares, TimelineRow, COMPARE_CSV_HEADER};

use crate::config::RunConfig;

const NS: f64 = 1e9;

pub const EVENT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation input: {0}")]
    Input(String),
    #[error("infeasible allocation at step {step}: {reason}")]
    Infeasible { step: u64, reason: String },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    History(#[from] crate::history_store::HistoryError),
    #[error(transparent)]
    Cost(#[from] crate::cost::CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StepBoundary,
    WeightUpdate,
    RolloutFinish,
    Migration,
    RewardDone,
    TrainDone,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t_ns: u64,
    pub kind: EventKind,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: MetricsReport,
    pub events: Vec<SimEvent>,
    pub timeline: Vec<TimelineRow>,
}

/// Persisted form of a run, consumed by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema_version: u32,
    pub label: String,
    pub config: RunConfig,
    pub report: MetricsReport,
}

pub fn events_jsonl(events: &[SimEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 64);
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}
