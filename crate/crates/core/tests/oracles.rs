mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rollsim_core::history_store::{HistoryStore, PromptId, Response, SuffixTree};
use rollsim_core::spec_engine::{next_window, AimdWindow};
use rollsim_core::trace::{generate, rank_metrics, token_similarity_replay, TraceSpec};
use statrs::distribution::{ContinuousCDF, LogNormal};

use common::*;

fn build(corpus: &[Response]) -> SuffixTree {
    SuffixTree::build(PromptId::from("p00000"), 1, corpus).unwrap()
}

/// A prefix that usually occurs: a slice of one of the responses, sometimes
/// with its last token replaced.
fn sample_prefix(rng: &mut impl Rng, corpus: &[Response], vocab: u32) -> Vec<u32> {
    let r = &corpus[rng.random_range(0..corpus.len())].tokens;
    let len = rng.random_range(1..=r.len().min(8));
    let start = rng.random_range(0..=r.len() - len);
    let mut p = r[start..start + len].to_vec();
    if rng.random_bool(0.2) {
        *p.last_mut().unwrap() = rng.random_range(0..vocab);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn drafts_and_priorities_match_a_direct_scan(seed in any::<u64>(), vocab in 2u32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = random_corpus(&mut rng, 12, 60, vocab);
        let tree = build(&corpus);
        tree.validate().unwrap();
        for _ in 0..20 {
            let prefix = sample_prefix(&mut rng, &corpus, vocab);
            let window = rng.random_range(1..=32);
            let expected = brute_force_draft(&corpus, &prefix, window);
            let handle = tree.match_prefix(&prefix);
            prop_assert_eq!(handle.is_some(), expected.is_some());
            if let Some(h) = handle {
                prop_assert_eq!(tree.priority_at(h), weighted_count(&corpus, &prefix));
            }
            let draft = tree.extract_draft(&prefix, window);
            prop_assert_eq!(draft.tokens, expected.unwrap_or_default(), "prefix {:?}", prefix);
        }
    }

    #[test]
    fn longest_match_is_the_longest_occurring_prefix(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = random_corpus(&mut rng, 6, 40, 3);
        let tree = build(&corpus);
        let query: Vec<u32> = (0..rng.random_range(0..30)).map(|_| rng.random_range(0..3)).collect();
        let expected = (0..=query.len()).rev().find(|&k| k == 0 || !occurrences(&corpus, &query[..k]).is_empty()).unwrap();
        prop_assert_eq!(tree.longest_match(&query), expected);
    }

    #[test]
    fn allocation_slope_is_within_precision_of_the_optimum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng);
        prop_assert!(check_allocation(&inst).is_ok(), "{:?}", check_allocation(&inst));
    }

    #[test]
    fn window_follows_the_closed_form(outcomes in proptest::collection::vec(any::<bool>(), 0..40)) {
        let mut w = AimdWindow::default();
        for (i, &a) in outcomes.iter().enumerate() {
            w = next_window(w, a);
            prop_assert_eq!(w.size, aimd_closed_form(&outcomes[..=i]));
        }
    }

    #[test]
    fn rank_categories_partition_the_responses(seed in 0u64..1000, groups in 1usize..12) {
        let trace = generate(&TraceSpec::table2_like(48, 2, seed)).unwrap();
        let m = rank_metrics(&trace, (1, 2), groups).unwrap();
        let sum = m.accurate_pct + m.not_last_10_pct + m.within_1p1x_pct + m.migrated_pct;
        prop_assert!((sum - 100.0).abs() < 1e-9, "{}", sum);
        prop_assert_eq!(m.responses, trace.responses.iter().filter(|r| r.epoch == 2).count());
    }
}

#[test]
fn snapshots_stay_whole_under_concurrent_ingest() {
    let store = Arc::new(HistoryStore::new(2));
    let stop = Arc::new(AtomicBool::new(false));
    let p = PromptId::from("p00000");
    // Epoch e holds e responses, each of e repeated e times.
    let corpus = |e: u32| (0..e).map(|_| Response::new("p00000", e, vec![e; e as usize], 1.0)).collect::<Vec<_>>();
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let (store, stop, p) = (Arc::clone(&store), Arc::clone(&stop), p.clone());
            std::thread::spawn(move || {
                let mut last = 0;
                let mut seen = 0;
                while !stop.load(Ordering::Relaxed) {
                    if let Some(t) = store.snapshot(&p) {
                        let e = t.epoch();
                        assert!(e >= last, "epoch went back from {last} to {e}");
                        assert_eq!(t.response_count(), e as usize);
                        assert_eq!(t.total_tokens(), (e * e) as usize);
                        let d = t.extract_draft(&[e], 64);
                        assert_eq!(d.tokens, vec![e; e as usize - 1]);
                        last = e;
                        seen += 1;
                    }
                }
                seen
            })
        })
        .collect();
    let mut tickets = Vec::new();
    for e in 1..=60 {
        tickets.push(store.ingest_epoch(p.clone(), e, corpus(e)).unwrap());
    }
    for t in tickets {
        t.wait();
    }
    assert!(store.ingest_epoch(p.clone(), 60, corpus(60)).is_err());
    std::thread::sleep(std::time::Duration::from_millis(20));
    stop.store(true, Ordering::Relaxed);
    for r in readers {
        assert!(r.join().unwrap() > 0);
    }
    assert_eq!(store.snapshot(&p).unwrap().epoch(), 60);
}

#[test]
fn first_epoch_lengths_follow_the_configured_log_normal() {
    let mut spec = TraceSpec::long_tail(20_000, 1, 7);
    spec.base_len.mu = 200f64.ln();
    spec.group_size = 1;
    let trace = generate(&spec).unwrap();
    let mut lens: Vec<usize> = trace.responses.iter().map(|r| r.tokens.len()).collect();
    lens.sort_unstable();
    let dist = LogNormal::new(spec.base_len.mu, spec.base_len.sigma).unwrap();
    let n = lens.len() as f64;
    // Lengths are rounded to whole tokens, so x stands for [x - 0.5, x + 0.5).
    let mut ks: f64 = 0.0;
    let mut i = 0;
    while i < lens.len() {
        let x = lens[i];
        let j = lens.partition_point(|&l| l <= x);
        ks = ks.max((i as f64 / n - dist.cdf(x as f64 - 0.5)).abs());
        ks = ks.max((j as f64 / n - dist.cdf(x as f64 + 0.5)).abs());
        i = j;
    }
    // 1% critical value of the one-sample KS statistic.
    assert!(ks < 1.628 / n.sqrt(), "KS statistic {ks}");
}

#[test]
fn identical_specs_give_identical_trace_bytes() {
    let spec = TraceSpec::long_tail(40, 3, 99);
    let mut a = Vec::new();
    let mut b = Vec::new();
    generate(&spec).unwrap().write_jsonl(&mut a).unwrap();
    generate(&spec).unwrap().write_jsonl(&mut b).unwrap();
    assert_eq!(a, b);
    let mut c = Vec::new();
    generate(&TraceSpec { seed: 100, ..spec }).unwrap().write_jsonl(&mut c).unwrap();
    assert_ne!(a, c);
}

#[test]
fn replay_acceptance_tracks_similarity() {
    let mut spec = TraceSpec::math_like(48, 2, 3);
    spec.base_len.mu = 400f64.ln();
    let at = |s: f64| {
        let t = generate(&TraceSpec { similarity: s, ..spec.clone() }).unwrap();
        token_similarity_replay(&t, (1, 2), 3).unwrap().acceptance()
    };
    let none = at(0.0);
    assert!(none < 0.05, "{none}");
    let mut last = none;
    for s in [0.5, 0.8, 0.93, 1.0] {
        let a = at(s);
        assert!(a > last, "acceptance {a} at s={s} not above {last}");
        last = a;
    }

    // A positive similarity_step raises acceptance in later epochs.
    let t = generate(&TraceSpec { similarity: 0.6, similarity_step: 0.15, epochs: 4, ..spec }).unwrap();
    let per_epoch: Vec<f64> =
        (1..4).map(|e| token_similarity_replay(&t, (e, e + 1), 3).unwrap().acceptance()).collect();
    assert!(per_epoch.windows(2).all(|w| w[1] > w[0]), "{per_epoch:?}");
}

#[test]
fn finer_groups_migrate_no_fewer_responses() {
    for seed in 0..4 {
        let trace = generate(&TraceSpec::table2_like(128, 2, seed)).unwrap();
        let m8 = rank_metrics(&trace, (1, 2), 8).unwrap();
        let m16 = rank_metrics(&trace, (1, 2), 16).unwrap();
        assert!(m16.migrated_pct >= m8.migrated_pct, "seed {seed}: {} < {}", m16.migrated_pct, m8.migrated_pct);
    }
}
