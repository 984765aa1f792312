//! Rollout acceleration toolkit for LLM reinforcement learning.
//!
//! Speculative drafting from earlier epochs and length-aware scheduling of
//! rollouts, plus the machinery to evaluate both without GPUs:
//!
//! * [`history_store`] indexes last-epoch responses of each prompt in a
//!   reward-weighted suffix tree and serves speculative drafts from it.
//! * [`spec_engine`] drives per-response speculative decoding with an AIMD
//!   speculation window, a shrinking prefix policy and a batch-size gate.
//! * [`scheduler`] builds length-ranked prompt groups, alternates their
//!   placement across steps, plans unequal worker counts per group and decides
//!   migrations of anomalously long rollouts.
//! * [`trace`] synthesizes multi-epoch rollout traces and computes the
//!   token-similarity and rank-stability metrics on any trace.
//! * [`sim`] is a deterministic discrete-event simulator of the
//!   rollout → reward → train pipeline.

pub mod config;
pub mod cost;
pub mod history_store;
pub mod scheduler;
pub mod sim;
pub mod spec_engine;
pub mod trace;

/// Token identifier inside a vocabulary.
pub type TokenId = u32;
