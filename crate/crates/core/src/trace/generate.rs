use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use rayon::prelude::*;

use super::{Trace, TraceError, TraceSpec};
use crate::history_store::{PromptId, Response};
use crate::TokenId;

/// Generate a deterministic multi-epoch trace.
///
/// Each prompt carries a latent length score that follows an AR(1) process
/// across epochs with correlation `rank_correlation`; the prompt's log-median
/// length is `mu + sigma_p * z` plus the cumulative epoch growth. Response
/// lengths scatter around that median with the within-prompt spread. Tokens of
/// epoch `e` are mutated copies of the canonical response of epoch `e - 1`
/// (the longest high-reward one), with mutations in geometric bursts.
///
/// Output is ordered by epoch, then prompt, then response index.
pub fn generate(spec: &TraceSpec) -> Result<Trace, TraceError> {
    spec.validate()?;
    let growth = epoch_log_growth(spec);
    let width = spec.num_prompts.saturating_sub(1).to_string().len().max(5);
    let per_prompt: Vec<Vec<Vec<Response>>> = (0..spec.num_prompts)
        .into_par_iter()
        .map(|i| gen_prompt(spec, &growth, PromptId(format!("p{i:0width$}")), i as u64))
        .collect();
    let mut responses = Vec::with_capacity(spec.num_prompts * spec.group_size * spec.epochs as usize);
    for e in 0..spec.epochs as usize {
        for p in &per_prompt {
            responses.extend(p[e].iter().cloned());
        }
    }
    Ok(Trace { responses })
}

/// Cumulative log multiplier applied at each epoch (index 0 = epoch 1).
fn epoch_log_growth(spec: &TraceSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let g = spec.length_growth;
    let mut acc = 0.0;
    let mut out = vec![0.0];
    for _ in 1..spec.epochs {
        let eps: f64 = rng.sample(StandardNormal);
        acc += g.mean.ln() + g.sigma * eps;
        out.push(acc);
    }
    out
}

fn gen_prompt(spec: &TraceSpec, growth: &[f64], prompt: PromptId, index: u64) -> Vec<Vec<Response>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index + 1);
    let sigma = spec.base_len.sigma;
    let sigma_p = sigma * (1.0 - spec.within_prompt_share).sqrt();
    let sigma_w = sigma * spec.within_prompt_share.sqrt();
    let rho = spec.rank_correlation;
    let innovation = (1.0 - rho * rho).sqrt();

    let mut z: f64 = rng.sample(StandardNormal);
    let mut source: Vec<TokenId> = Vec::new();
    let mut epochs = Vec::with_capacity(spec.epochs as usize);
    for e in 1..=spec.epochs {
        if e > 1 {
            let eps: f64 = rng.sample(StandardNormal);
            z = rho * z + innovation * eps;
        }
        let log_median = spec.base_len.mu + growth[e as usize - 1] + sigma_p * z;
        let lens: Vec<usize> = (0..spec.group_size)
            .map(|_| {
                let eps: f64 = rng.sample(StandardNormal);
                let l = (log_median + sigma_w * eps).exp().round();
                l.clamp(1.0, spec.max_len as f64) as usize
            })
            .collect();
        if e == 1 {
            let longest = lens.iter().copied().max().unwrap_or(1);
            source = (0..longest).map(|_| rng.random_range(0..spec.vocab_size)).collect();
        }
        let s = spec.similarity_at(e);
        let group: Vec<Response> = lens
            .iter()
            .map(|&len| {
                let tokens = mutate(&source, len, s, spec.burst_mean, spec.vocab_size, &mut rng);
                let reward = if rng.random_bool(spec.high_reward_fraction) { 1.0 } else { 0.0 };
                Response::new(prompt.clone(), e, tokens, reward)
            })
            .collect();
        source = canonical(&group).to_vec();
        epochs.push(group);
    }
    epochs
}

/// Longest high-reward response of a group; the longest overall if none scored high.
fn canonical(group: &[Response]) -> &[TokenId] {
    let mut best: Option<&Response> = None;
    for high in [true, false] {
        for r in group.iter().filter(|r| !high || r.reward > 0.5) {
            if best.is_none_or(|b| r.tokens.len() > b.tokens.len()) {
                best = Some(r);
            }
        }
        if best.is_some() {
            break;
        }
    }
    best.map(|r| r.tokens.as_slice()).unwrap_or(&[])
}

/// Copy `len` tokens of `source`, replacing bursts so that the expected
/// replaced fraction is `1 - s`. Positions past the end of `source` get fresh
/// random tokens.
fn mutate(source: &[TokenId], len: usize, s: f64, burst_mean: f64, vocab: u32, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(len);
    if s <= 0.0 {
        out.extend((0..len).map(|_| rng.random_range(0..vocab)));
        return out;
    }
    // Copy runs have mean (1 - h) / h and bursts mean b, so the replaced
    // share is hb / (hb + 1 - h), which equals 1 - s for this h.
    let start_p = (1.0 - s) / (burst_mean * s + 1.0 - s);
    let burst = Geometric::new(1.0 / burst_mean).expect("burst_mean >= 1");
    let mut remaining = 0u64;
    for i in 0..len {
        let Some(&src) = source.get(i) else {
            out.push(rng.random_range(0..vocab));
            continue;
        };
        if remaining == 0 && start_p > 0.0 && rng.random_bool(start_p) {
            remaining = 1 + burst.sample(rng);
        }
        if remaining > 0 {
            remaining -= 1;
            // Draw from the vocabulary minus the source token so a burst never copies.
            let t = rng.random_range(0..vocab - 1);
            out.push(if t >= src { t + 1 } else { t });
        } else {
            out.push(src);
        }
    }
    out
}
