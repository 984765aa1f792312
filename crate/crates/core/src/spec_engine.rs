//! Per-response speculative decoding driven by history drafts.
//!
//! Each decode iteration takes the last few generated tokens as a lookup
//! prefix, pulls a draft from the prompt's suffix tree and verifies it
//! against the ground-truth continuation. The number of drafted tokens
//! follows an additive-increase / reset window; the prefix length shrinks
//! while lookups miss and snaps back after a hit.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history_store::SuffixTree;
use crate::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("response already complete")]
    Complete,
    #[error("invalid speculation config: {0}")]
    Config(String),
}

/// Speculation window: grows by `add_step` after a fully accepted draft,
/// resets to `init` on any rejection, never exceeds `max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AimdWindow {
    pub size: usize,
    pub init: usize,
    pub add_step: usize,
    pub max: usize,
}

impl AimdWindow {
    pub fn new(init: usize, add_step: usize, max: usize) -> Result<Self, SpecError> {
        if init == 0 || init > max {
            return Err(SpecError::Config(format!("window init {init} must be in 1..={max}")));
        }
        Ok(Self { size: init, init, add_step, max })
    }
}

impl Default for AimdWindow {
    fn default() -> Self {
        Self { size: 2, init: 2, add_step: 2, max: 32 }
    }
}

pub fn next_window(w: AimdWindow, all_accepted: bool) -> AimdWindow {
    let size = if all_accepted { (w.size + w.add_step).min(w.max) } else { w.init };
    AimdWindow { size, ..w }
}

/// Lookup prefix length policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixPolicy {
    pub initial_len: usize,
    pub min_len: usize,
    pub current_len: usize,
}

impl PrefixPolicy {
    pub fn new(initial_len: usize, min_len: usize) -> Result<Self, SpecError> {
        if min_len == 0 || min_len > initial_len {
            return Err(SpecError::Config(format!("prefix min {min_len} must be in 1..={initial_len}")));
        }
        Ok(Self { initial_len, min_len, current_len: initial_len })
    }
}

impl Default for PrefixPolicy {
    fn default() -> Self {
        Self { initial_len: 7, min_len: 3, current_len: 7 }
    }
}

pub fn choose_prefix(p: PrefixPolicy, found_match: bool) -> PrefixPolicy {
    let current_len = if found_match { p.initial_len } else { p.current_len.saturating_sub(1).max(p.min_len) };
    PrefixPolicy { current_len, ..p }
}

/// Number of leading draft tokens that agree with the true continuation.
pub fn verify(draft: &[TokenId], truth: &[TokenId]) -> usize {
    draft.iter().zip(truth).take_while(|(a, b)| a == b).count()
}

/// Maximum viable batch size per acceptance-rate decile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchGate {
    deciles: [usize; 10],
}

/// One gate table row: acceptance in `[lo, hi)` allows batches up to `max_batch`.
pub type GateRow = (f64, f64, usize);

impl BatchGate {
    /// Build from rows covering `[0, 1]` on decile boundaries.
    pub fn from_rows(rows: &[GateRow]) -> Result<Self, SpecError> {
        let mut deciles = [None; 10];
        for &(lo, hi, max_batch) in rows {
            let (a, b) = ((lo * 10.0).round(), (hi * 10.0).round());
            if (a / 10.0 - lo).abs() > 1e-9 || (b / 10.0 - hi).abs() > 1e-9 || a < 0.0 || b > 10.0 || a >= b {
                return Err(SpecError::Config(format!("gate row [{lo}, {hi}) is not a decile range")));
            }
            if max_batch == 0 {
                return Err(SpecError::Config("gate max batch must be at least 1".into()));
            }
            for slot in &mut deciles[a as usize..b as usize] {
                if slot.replace(max_batch).is_some() {
                    return Err(SpecError::Config(format!("gate rows overlap at [{lo}, {hi})")));
                }
            }
        }
        let mut out = [0; 10];
        for (i, d) in deciles.iter().enumerate() {
            out[i] = d.ok_or_else(|| SpecError::Config(format!("gate table misses decile {i}")))?;
        }
        if out.windows(2).any(|w| w[0] > w[1]) {
            return Err(SpecError::Config("gate max batch must not decrease with acceptance".into()));
        }
        Ok(Self { deciles: out })
    }

    pub fn max_batch(&self, acceptance: f64) -> usize {
        let bucket = (acceptance.clamp(0.0, 1.0) * 10.0).floor() as usize;
        self.deciles[bucket.min(9)]
    }
}

impl Default for BatchGate {
    fn default() -> Self {
        Self { deciles: [8192; 10] }
    }
}

pub fn gate_check(gate: &BatchGate, current_batch: usize, recent_acceptance: f64) -> bool {
    current_batch <= gate.max_batch(recent_acceptance)
}

/// Speculation settings (`spec.*` config keys).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecConfig {
    pub enabled: bool,
    pub window_init: usize,
    pub window_add: usize,
    pub window_max: usize,
    pub prefix_init: usize,
    pub prefix_min: usize,
    pub gate_table: Vec<GateRow>,
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window_init: 2,
            window_add: 2,
            window_max: 32,
            prefix_init: 7,
            prefix_min: 3,
            gate_table: vec![(0.0, 1.0, 8192)],
        }
    }
}

impl SpecConfig {
    pub fn window(&self) -> Result<AimdWindow, SpecError> {
        AimdWindow::new(self.window_init, self.window_add, self.window_max)
    }

    pub fn prefix(&self) -> Result<PrefixPolicy, SpecError> {
        PrefixPolicy::new(self.prefix_init, self.prefix_min)
    }

    pub fn gate(&self) -> Result<BatchGate, SpecError> {
        BatchGate::from_rows(&self.gate_table)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        self.window()?;
        self.prefix()?;
        self.gate()?;
        Ok(())
    }
}

/// Plain counters of speculative decoding work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecCounters {
    pub tokens_total: u64,
    pub tokens_speculated: u64,
    pub tokens_accepted: u64,
    pub verify_passes: u64,
    pub decode_passes: u64,
}

impl SpecCounters {
    /// Share of generated tokens that came from accepted drafts.
    pub fn speculation_rate(&self) -> f64 {
        ratio(self.tokens_accepted, self.tokens_total)
    }

    /// Share of drafted tokens that verification accepted.
    pub fn acceptance_rate(&self) -> f64 {
        ratio(self.tokens_accepted, self.tokens_speculated)
    }

    pub fn iterations(&self) -> u64 {
        self.verify_passes + self.decode_passes
    }

    pub fn record(&mut self, o: &StepOutcome) {
        self.tokens_total += o.appended as u64;
        self.tokens_speculated += o.drafted as u64;
        self.tokens_accepted += o.accepted as u64;
        if o.verified {
            self.verify_passes += 1;
        } else {
            self.decode_passes += 1;
        }
    }

    pub fn merge(&mut self, other: &SpecCounters) {
        self.tokens_total += other.tokens_total;
        self.tokens_speculated += other.tokens_speculated;
        self.tokens_accepted += other.tokens_accepted;
        self.verify_passes += other.verify_passes;
        self.decode_passes += other.decode_passes;
    }

    /// `step,speculation_rate,acceptance_rate,verify_passes,decode_passes`
    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{:.6},{:.6},{},{}",
            self.speculation_rate(),
            self.acceptance_rate(),
            self.verify_passes,
            self.decode_passes
        )
    }

    pub const CSV_HEADER: &'static str = "step,speculation_rate,acceptance_rate,verify_passes,decode_passes";
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Shared counters updated from many concurrently stepped responses.
#[derive(Debug, Default)]
pub struct SpecStats {
    tokens_total: AtomicU64,
    tokens_speculated: AtomicU64,
    tokens_accepted: AtomicU64,
    verify_passes: AtomicU64,
    decode_passes: AtomicU64,
}

impl SpecStats {
    pub fn add(&self, c: &SpecCounters) {
        self.tokens_total.fetch_add(c.tokens_total, Ordering::Relaxed);
        self.tokens_speculated.fetch_add(c.tokens_speculated, Ordering::Relaxed);
        self.tokens_accepted.fetch_add(c.tokens_accepted, Ordering::Relaxed);
        self.verify_passes.fetch_add(c.verify_passes, Ordering::Relaxed);
        self.decode_passes.fetch_add(c.decode_passes, Ordering::Relaxed);
    }

    pub fn record(&self, o: &StepOutcome) {
        let mut c = SpecCounters::default();
        c.record(o);
        self.add(&c);
    }

    pub fn snapshot(&self) -> SpecCounters {
        SpecCounters {
            tokens_total: self.tokens_total.load(Ordering::Relaxed),
            tokens_speculated: self.tokens_speculated.load(Ordering::Relaxed),
            tokens_accepted: self.tokens_accepted.load(Ordering::Relaxed),
            verify_passes: self.verify_passes.load(Ordering::Relaxed),
            decode_passes: self.decode_passes.load(Ordering::Relaxed),
        }
    }
}

/// Result of one decode iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepOutcome {
    pub appended: usize,
    pub drafted: usize,
    pub accepted: usize,
    /// True when a draft was verified, false for a plain decode pass.
    pub verified: bool,
}

/// Decode state of one response replayed against its true token sequence.
#[derive(Debug, Clone)]
pub struct ResponseState<'a> {
    truth: &'a [TokenId],
    output: Vec<TokenId>,
    pub window: AimdWindow,
    pub prefix: PrefixPolicy,
    pub counters: SpecCounters,
}

impl<'a> ResponseState<'a> {
    pub fn new(truth: &'a [TokenId], window: AimdWindow, prefix: PrefixPolicy) -> Self {
        Self { truth, output: Vec::with_capacity(truth.len()), window, prefix, counters: SpecCounters::default() }
    }

    pub fn output(&self) -> &[TokenId] {
        &self.output
    }

    pub fn is_complete(&self) -> bool {
        self.output.len() >= self.truth.len()
    }

    /// Look up a draft, shrinking the prefix while lookups miss.
    fn lookup(&mut self, tree: &SuffixTree) -> Vec<TokenId> {
        let generated = self.output.len();
        if generated < self.prefix.min_len {
            return Vec::new();
        }
        loop {
            let len = self.prefix.current_len.min(generated);
            let draft = tree.extract_draft(&self.output[generated - len..], self.window.size).tokens;
            let found = !draft.is_empty();
            let at_floor = len <= self.prefix.min_len;
            self.prefix = choose_prefix(self.prefix, found);
            if found || at_floor {
                return draft;
            }
        }
    }

    /// Run one decode iteration.
    pub fn step(&mut self, tree: Option<&SuffixTree>, speculate: bool) -> Result<StepOutcome, SpecError> {
        if self.is_complete() {
            return Err(SpecError::Complete);
        }
        let pos = self.output.len();
        let draft = match tree {
            Some(t) if speculate => self.lookup(t),
            _ => Vec::new(),
        };
        let outcome = if draft.is_empty() {
            self.output.push(self.truth[pos]);
            StepOutcome { appended: 1, drafted: 0, accepted: 0, verified: false }
        } else {
            let accepted = verify(&draft, &self.truth[pos..]);
            self.output.extend_from_slice(&draft[..accepted]);
            // The verification pass itself decodes one more token.
            if let Some(&t) = self.truth.get(pos + accepted) {
                self.output.push(t);
            }
            self.window = next_window(self.window, accepted == draft.len());
            StepOutcome { appended: self.output.len() - pos, drafted: draft.len(), accepted, verified: true }
        };
        self.counters.record(&outcome);
        Ok(outcome)
    }
}

/// Per-iteration record of a fully decoded response.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodeTrace {
    /// Tokens appended at each iteration.
    pub appended: Vec<u32>,
    /// Draft tokens verified at each iteration.
    pub drafted: Vec<u32>,
    pub counters: SpecCounters,
}

/// Decode `truth` to completion, recording every iteration.
pub fn decode_response(
    truth: &[TokenId],
    tree: Option<&SuffixTree>,
    cfg: &SpecConfig,
) -> Result<DecodeTrace, SpecError> {
    let mut state = ResponseState::new(truth, cfg.window()?, cfg.prefix()?);
    let mut trace = DecodeTrace::default();
    while !state.is_complete() {
        let o = state.step(tree, cfg.enabled)?;
        trace.appended.push(o.appended as u32);
        trace.drafted.push(o.drafted as u32);
    }
    trace.counters = state.counters;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history_store::{PromptId, Response};

    fn tree(seqs: &[&[u32]]) -> SuffixTree {
        let rs: Vec<_> = seqs.iter().map(|s| Response::new("p", 1, s.to_vec(), 1.0)).collect();
        SuffixTree::build(PromptId::from("p"), 1, &rs).unwrap()
    }

    #[test]
    fn window_rules() {
        let w = AimdWindow::default();
        assert_eq!(next_window(w, true).size, 4);
        assert_eq!(next_window(AimdWindow { size: 30, ..w }, true).size, 32);
        assert_eq!(next_window(AimdWindow { size: 32, ..w }, true).size, 32);
        assert_eq!(next_window(AimdWindow { size: 24, ..w }, false).size, 2);
    }

    #[test]
    fn window_resets_to_configured_init() {
        let w = AimdWindow::new(4, 3, 16).unwrap();
        assert_eq!(next_window(next_window(w, true), false).size, 4);
        assert!(AimdWindow::new(0, 2, 32).is_err());
    }

    #[test]
    fn prefix_rules() {
        let p = PrefixPolicy::default();
        assert_eq!(choose_prefix(p, false).current_len, 6);
        assert_eq!(choose_prefix(PrefixPolicy { current_len: 3, ..p }, false).current_len, 3);
        assert_eq!(choose_prefix(PrefixPolicy { current_len: 5, ..p }, true).current_len, 7);
    }

    #[test]
    fn verify_is_common_prefix() {
        assert_eq!(verify(&[5, 6, 7], &[5, 6, 9, 1]), 2);
        let t: Vec<u32> = (0..8).collect();
        assert_eq!(verify(&t, &t), 8);
        assert_eq!(verify(&[], &[1]), 0);
    }

    #[test]
    fn gate_table_semantics() {
        let g = BatchGate::default();
        assert!(gate_check(&g, 1, 0.0));
        assert!(!gate_check(&g, 8193, 0.95));
        let g = BatchGate::from_rows(&[
            (0.0, 0.2, 64),
            (0.2, 0.4, 512),
            (0.4, 0.6, 1024),
            (0.6, 0.8, 4096),
            (0.8, 1.0, 8192),
        ])
        .unwrap();
        assert!(gate_check(&g, 2176, 0.7));
        assert!(!gate_check(&g, 2176, 0.5));
        assert!(gate_check(&g, 1, 0.05));
        assert!(gate_check(&g, 8192, 1.0));
    }

    #[test]
    fn gate_table_validation() {
        assert!(BatchGate::from_rows(&[(0.0, 0.5, 10)]).is_err());
        assert!(BatchGate::from_rows(&[(0.0, 0.5, 100), (0.5, 1.0, 10)]).is_err());
        assert!(BatchGate::from_rows(&[(0.0, 0.55, 10), (0.55, 1.0, 10)]).is_err());
        assert!(BatchGate::from_rows(&[(0.0, 1.0, 0)]).is_err());
    }

    #[test]
    fn no_history_decodes_one_token() {
        let truth = [1, 2, 3, 4];
        let mut s = ResponseState::new(&truth, AimdWindow::default(), PrefixPolicy::default());
        let o = s.step(None, true).unwrap();
        assert_eq!(o.appended, 1);
        assert_eq!(s.counters.decode_passes, 1);
    }

    #[test]
    fn full_accept_appends_bonus_and_grows_window() {
        let truth: Vec<u32> = (10..30).collect();
        let t = tree(&[&truth]);
        let cfg = SpecConfig { prefix_init: 3, ..SpecConfig::default() };
        let mut s = ResponseState::new(&truth, cfg.window().unwrap(), cfg.prefix().unwrap());
        for _ in 0..3 {
            s.step(Some(&t), true).unwrap();
        }
        let o = s.step(Some(&t), true).unwrap();
        assert_eq!((o.appended, o.accepted, o.drafted), (3, 2, 2));
        assert_eq!(s.window.size, 4);
    }

    #[test]
    fn complete_response_is_an_error() {
        let truth = [7];
        let mut s = ResponseState::new(&truth, AimdWindow::default(), PrefixPolicy::default());
        s.step(None, true).unwrap();
        assert_eq!(s.step(None, true), Err(SpecError::Complete));
    }

    #[test]
    fn disabled_speculation_never_drafts() {
        let truth: Vec<u32> = (0..50).collect();
        let t = tree(&[&truth]);
        let cfg = SpecConfig { enabled: false, ..SpecConfig::default() };
        let d = decode_response(&truth, Some(&t), &cfg).unwrap();
        assert_eq!(d.counters.decode_passes, 50);
        assert_eq!(d.counters.tokens_speculated, 0);
    }

    #[test]
    fn shared_stats_aggregate() {
        let stats = SpecStats::default();
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..1000 {
                        stats.record(&StepOutcome { appended: 3, drafted: 2, accepted: 2, verified: true });
                    }
                });
            }
        });
        let c = stats.snapshot();
        assert_eq!(c.verify_passes, 4000);
        assert_eq!(c.tokens_total, 12000);
        assert!((c.acceptance_rate() - 1.0).abs() < 1e-12);
    }
}
