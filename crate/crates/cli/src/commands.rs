use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use rollsim_core::config::{RunConfig, RUN_SCHEMA_VERSION};
use rollsim_core::cost::{CostModel, ProfileCost};
use rollsim_core::history_store::{Response, SuffixTree};
use rollsim_core::scheduler::{build_groups, plan_allocation, PlanParams, SchedError};
use rollsim_core::sim::{
    compare_csv, events_jsonl, run, timeline_csv, MetricsReport, RunRecord, SimOutput, REPORT_SCHEMA_VERSION,
};
use rollsim_core::spec_engine::{decode_response, SpecCounters};
use rollsim_core::trace::{
    generate, prompt_history, rank_metrics, rank_metrics_mean, token_similarity_replay, RankMetrics, ReplayStats,
    Trace, TraceSpec, TRACE_SCHEMA_VERSION,
};
use serde::Serialize;
use serde_json::json;

use crate::io::{read_text, read_trace, replica_path, require_file, table, write_atomic, write_json, Failure};
use crate::{
    BenchSpecArgs, Format, GenTraceArgs, PlanAllocArgs, RankArgs, ReportArgs, RunSimArgs, SimilarityArgs,
    ANALYSIS_SCHEMA_VERSION, PLAN_SCHEMA_VERSION,
};

type Output = Result<String, Failure>;

fn json_line(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string(v).expect("output serializes");
    s.push('\n');
    s
}

fn f(x: f64) -> String {
    format!("{x:.4}")
}

fn consecutive_pairs(trace: &Trace) -> Result<Vec<(u32, u32)>, Failure> {
    let pairs: Vec<(u32, u32)> = trace.epochs().windows(2).map(|w| (w[0], w[1])).collect();
    if pairs.is_empty() {
        return Err(Failure::Config("trace needs at least two epochs".into()));
    }
    Ok(pairs)
}

pub fn gen_trace(a: GenTraceArgs, pretty: bool) -> Output {
    let text = read_text(&a.spec)?;
    let bad = |e: &dyn std::fmt::Display| Failure::Config(format!("{}: {e}", a.spec.display()));
    let mut spec: TraceSpec = if a.spec.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| bad(&e))?
    } else {
        toml::from_str(&text).map_err(|e| bad(&e))?
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let trace = generate(&spec)?;
    write_atomic(&a.out, |w| trace.write_jsonl(w).map_err(std::io::Error::other))?;
    let epochs = trace.epochs();
    let prompts = trace.by_prompt(epochs[0])?.len();
    if pretty {
        let rows = vec![
            vec!["out".into(), a.out.display().to_string()],
            vec!["responses".into(), trace.responses.len().to_string()],
            vec!["prompts".into(), prompts.to_string()],
            vec!["epochs".into(), epochs.len().to_string()],
            vec!["seed".into(), spec.seed.to_string()],
        ];
        return Ok(table(&["field", "value"], &rows));
    }
    Ok(json_line(&json!({
        "schema_version": TRACE_SCHEMA_VERSION,
        "out": a.out,
        "responses": trace.responses.len(),
        "prompts": prompts,
        "epochs": epochs,
        "seed": spec.seed,
    })))
}

#[derive(Serialize)]
struct RankRow {
    prev: u32,
    cur: u32,
    #[serde(flatten)]
    metrics: RankMetrics,
}

pub fn analyze_rank(a: RankArgs, pretty: bool) -> Output {
    let trace = read_trace(&a.trace)?;
    let pairs = match a.epochs {
        Some(p) => vec![p],
        None => consecutive_pairs(&trace)?,
    };
    let rows: Vec<RankRow> = pairs
        .iter()
        .map(|&(prev, cur)| Ok(RankRow { prev, cur, metrics: rank_metrics(&trace, (prev, cur), a.groups)? }))
        .collect::<Result<_, Failure>>()?;
    let mean = match a.epochs {
        Some(_) => rows[0].metrics,
        None => rank_metrics_mean(&trace, a.groups)?,
    };
    if pretty {
        let mut cells: Vec<Vec<String>> =
            rows.iter().map(|r| rank_cells(&format!("{}->{}", r.prev, r.cur), &r.metrics)).collect();
        cells.push(rank_cells("mean", &mean));
        return Ok(table(&["epochs", "accurate%", "not_last_10%", "within_1.1x%", "migrated%", "responses"], &cells));
    }
    match a.format {
        Format::Csv => {
            let mut out =
                String::from("prev,cur,accurate_pct,not_last_10_pct,within_1p1x_pct,migrated_pct,responses\n");
            for r in &rows {
                let m = &r.metrics;
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6},{:.6},{:.6},{}",
                    r.prev, r.cur, m.accurate_pct, m.not_last_10_pct, m.within_1p1x_pct, m.migrated_pct, m.responses
                );
            }
            Ok(out)
        }
        Format::Json => Ok(json_line(&json!({
            "schema_version": ANALYSIS_SCHEMA_VERSION,
            "groups": a.groups,
            "pairs": rows,
            "mean": mean,
        }))),
    }
}

fn rank_cells(label: &str, m: &RankMetrics) -> Vec<String> {
    vec![
        label.to_owned(),
        format!("{:.2}", m.accurate_pct),
        format!("{:.2}", m.not_last_10_pct),
        format!("{:.2}", m.within_1p1x_pct),
        format!("{:.2}", m.migrated_pct),
        m.responses.to_string(),
    ]
}

#[derive(Serialize)]
struct ReplayRow {
    prev: u32,
    cur: u32,
    #[serde(flatten)]
    stats: ReplayStats,
    acceptance: f64,
    acceptance_after_warmup: f64,
}

impl ReplayRow {
    fn new(prev: u32, cur: u32, stats: ReplayStats) -> Self {
        Self {
            prev,
            cur,
            stats,
            acceptance: stats.acceptance(),
            acceptance_after_warmup: stats.acceptance_after_warmup(),
        }
    }
}

fn replay_pairs(trace: &Trace, pairs: &[(u32, u32)], prefix: usize) -> Result<(Vec<ReplayRow>, ReplayStats), Failure> {
    let mut rows = Vec::new();
    let mut total = ReplayStats::default();
    for &(prev, cur) in pairs {
        let s = token_similarity_replay(trace, (prev, cur), prefix)?;
        total.accepted += s.accepted;
        total.total += s.total;
        total.warmup += s.warmup;
        rows.push(ReplayRow::new(prev, cur, s));
    }
    Ok((rows, total))
}

pub fn analyze_similarity(a: SimilarityArgs, pretty: bool) -> Output {
    let trace = read_trace(&a.trace)?;
    let pairs = match a.epochs {
        Some(p) => vec![p],
        None => consecutive_pairs(&trace)?,
    };
    let (rows, total) = replay_pairs(&trace, &pairs, a.prefix)?;
    if pretty {
        let mut cells: Vec<Vec<String>> =
            rows.iter().map(|r| replay_cells(&format!("{}->{}", r.prev, r.cur), &r.stats)).collect();
        cells.push(replay_cells("all", &total));
        return Ok(table(&["epochs", "accepted", "total", "acceptance", "after_warmup"], &cells));
    }
    match a.format {
        Format::Csv => {
            let mut out = String::from("prev,cur,accepted,total,warmup,acceptance,acceptance_after_warmup\n");
            for r in &rows {
                let s = &r.stats;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{:.6},{:.6}",
                    r.prev, r.cur, s.accepted, s.total, s.warmup, r.acceptance, r.acceptance_after_warmup
                );
            }
            Ok(out)
        }
        Format::Json => Ok(json_line(&json!({
            "schema_version": ANALYSIS_SCHEMA_VERSION,
            "prefix": a.prefix,
            "pairs": rows,
            "overall": ReplayRow::new(pairs[0].0, pairs[pairs.len() - 1].1, total),
        }))),
    }
}

fn replay_cells(label: &str, s: &ReplayStats) -> Vec<String> {
    vec![
        label.to_owned(),
        s.accepted.to_string(),
        s.total.to_string(),
        f(s.acceptance()),
        f(s.acceptance_after_warmup()),
    ]
}

/// Decode every `cur` response with drafts from a suffix tree over the same
/// prompt's `prev` responses.
fn engine_pass(trace: &Trace, (prev, cur): (u32, u32), cfg: &RunConfig) -> Result<SpecCounters, Failure> {
    let history = trace.by_prompt(prev)?;
    let current = trace.by_prompt(cur)?;
    let per_prompt: Vec<Result<SpecCounters, Failure>> = current
        .par_iter()
        .map(|(p, rs)| {
            let tree = match history.get(p) {
                Some(h) => {
                    let owned: Vec<Response> = h.iter().map(|&r| r.clone()).collect();
                    Some(SuffixTree::build(p.clone(), prev, &owned).map_err(|e| Failure::Config(e.to_string()))?)
                }
                None => None,
            };
            let mut c = SpecCounters::default();
            for r in rs {
                let d =
                    decode_response(&r.tokens, tree.as_ref(), &cfg.spec).map_err(|e| Failure::Config(e.to_string()))?;
                c.merge(&d.counters);
            }
            Ok(c)
        })
        .collect();
    let mut total = SpecCounters::default();
    for c in per_prompt {
        total.merge(&c?);
    }
    Ok(total)
}

pub fn bench_spec(a: BenchSpecArgs, pretty: bool) -> Output {
    let cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let trace = read_trace(&a.trace)?;
    let epochs: Vec<u32> = trace.epochs().into_iter().take(a.epochs).collect();
    if a.epochs < 2 || epochs.len() < a.epochs {
        return Err(Failure::Config(format!(
            "--epochs {} needs that many epochs (trace has {})",
            a.epochs,
            trace.epochs().len()
        )));
    }
    let pairs: Vec<(u32, u32)> = epochs.windows(2).map(|w| (w[0], w[1])).collect();
    let (_, replay) = replay_pairs(&trace, &pairs, a.prefix)?;

    let start = Instant::now();
    let mut engine = SpecCounters::default();
    for &pair in &pairs {
        engine.merge(&engine_pass(&trace, pair, &cfg)?);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let tokens_per_pass = engine.tokens_total as f64 / engine.iterations().max(1) as f64;

    if pretty {
        let rows = vec![
            vec!["replay acceptance".into(), f(replay.acceptance())],
            vec!["replay acceptance after warm-up".into(), f(replay.acceptance_after_warmup())],
            vec!["engine acceptance rate".into(), f(engine.acceptance_rate())],
            vec!["engine speculation rate".into(), f(engine.speculation_rate())],
            vec!["engine tokens per pass".into(), f(tokens_per_pass)],
            vec!["engine seconds".into(), format!("{elapsed:.3}")],
        ];
        return Ok(table(&["metric", "value"], &rows));
    }
    Ok(json_line(&json!({
        "schema_version": ANALYSIS_SCHEMA_VERSION,
        "epochs": a.epochs,
        "prefix": a.prefix,
        "acceptance": replay.acceptance(),
        "replay": {
            "accepted": replay.accepted,
            "total": replay.total,
            "warmup": replay.warmup,
            "acceptance_after_warmup": replay.acceptance_after_warmup(),
        },
        "engine": {
            "counters": engine,
            "acceptance_rate": engine.acceptance_rate(),
            "speculation_rate": engine.speculation_rate(),
            "tokens_per_pass": tokens_per_pass,
            "elapsed_s": elapsed,
        },
    })))
}

pub fn plan_alloc(a: PlanAllocArgs, pretty: bool) -> Output {
    let bad = |m: String| Failure::Config(m);
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = &a.profile {
        cfg.cost.profile = Some(p.clone());
    }

    let (lens, default_batch) = match (&a.lens, &a.trace) {
        (Some(lens), _) => {
            if lens.windows(2).any(|w| w[1] < w[0]) || lens.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(bad("--lens must be non-negative and ascending".into()));
            }
            (lens.clone(), 16)
        }
        (None, Some(path)) => {
            let trace = read_trace(path)?;
            let epoch = match a.epoch {
                Some(e) => e,
                None => *trace.epochs().last().ok_or_else(|| bad("empty trace".into()))?,
            };
            let counts: BTreeMap<_, usize> = trace.by_prompt(epoch)?.into_iter().map(|(p, rs)| (p, rs.len())).collect();
            let groups = build_groups(&prompt_history(&trace, epoch)?, a.groups).map_err(|e| bad(e.to_string()))?;
            let batch = groups.iter().map(|g| g.prompt_ids.iter().map(|p| counts[p]).sum::<usize>()).max().unwrap_or(1);
            (groups.iter().map(|g| g.representative_len).collect(), batch)
        }
        (None, None) => unreachable!("clap requires --lens or --trace"),
    };

    let n = lens.len();
    if a.wks == 0 || !(a.precision.is_finite() && a.precision > 0.0) || !(a.t_train.is_finite() && a.t_train >= 0.0) {
        return Err(bad("--wks must be positive, --precision positive and --t-train non-negative".into()));
    }
    let mut params = PlanParams::defaults_for(a.wks, n);
    params.min_wks = a.min_wks;
    params.precision = a.precision;
    if let Some(m) = a.max_wks {
        params.max_wks = m;
    }
    if params.min_wks == 0 || params.max_wks < params.min_wks {
        return Err(bad("need 1 <= --min-wks <= --max-wks".into()));
    }

    let profile = match &cfg.cost.profile {
        Some(p) => {
            require_file(p)?;
            Some(ProfileCost::from_path(p).map_err(|e| bad(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let analytic = cfg.cost.planning_model(a.batch.unwrap_or(default_batch), a.accepted_per_pass);
    let model = |l: f64, k: usize| match &profile {
        Some(p) => p.tau(l, k),
        None => analytic.tau(l, k),
    };
    let plan = plan_allocation(&lens, a.wks, a.t_train, &params, &model).map_err(|e| match e {
        SchedError::TooFewWorkers { .. } => Failure::Infeasible(e.to_string()),
        other => bad(other.to_string()),
    })?;
    let predicted = plan.predicted_times(&lens, &model);

    let out = if pretty {
        let rows: Vec<Vec<String>> = (0..n)
            .map(|i| {
                vec![
                    i.to_string(),
                    format!("{:.1}", lens[i]),
                    plan.per_group_workers.get(i).map_or("-".into(), |k| k.to_string()),
                    predicted.get(i).map_or("-".into(), |&t| f(t)),
                    f(plan.t0 + i as f64 * plan.d),
                ]
            })
            .collect();
        format!(
            "t0 {:.4}  d {:.4}  feasible {}\n{}",
            plan.t0,
            plan.d,
            plan.feasible,
            table(&["group", "len", "workers", "predicted", "target"], &rows)
        )
    } else {
        json_line(&json!({
            "schema_version": PLAN_SCHEMA_VERSION,
            "t0": plan.t0,
            "d": plan.d,
            "per_group_workers": plan.per_group_workers,
            "feasible": plan.feasible,
            "lens": lens,
            "predicted_times": predicted,
            "wks": a.wks,
            "min_wks": params.min_wks,
            "max_wks": params.max_wks,
            "precision": params.precision,
        }))
    };
    if !plan.feasible {
        print!("{out}");
        return Err(Failure::Infeasible(format!(
            "{n} groups do not fit on {} workers with {}..={} workers each",
            a.wks, params.min_wks, params.max_wks
        )));
    }
    Ok(out)
}

pub fn run_sim(a: RunSimArgs, pretty: bool) -> Output {
    require_file(&a.trace)?;
    let mut cfg = match &a.cluster {
        Some(p) => {
            require_file(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(p) = a.policy {
        cfg.sim.policy = p;
    }
    if let Some(s) = a.seed {
        cfg.sim.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.sim.steps = s;
    }
    if a.no_spec {
        cfg.spec.enabled = false;
    }
    if let Some(p) = &cfg.cost.profile {
        require_file(p)?;
    }
    cfg.validate()?;
    let trace = read_trace(&a.trace)?;

    let replicas = a.replicas as usize;
    let outputs: Vec<(RunConfig, SimOutput)> = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.sim.seed = cfg.sim.seed.wrapping_add(i as u64);
            run(&trace, &c).map(|o| (c, o))
        })
        .collect::<Result<_, _>>()?;

    let base_label = a.label.clone().unwrap_or_else(|| cfg.sim.policy.name().to_owned());
    let path_for = |p: &std::path::Path, i: usize| if replicas == 1 { p.to_owned() } else { replica_path(p, i) };
    let mut summary = Vec::new();
    for (i, (c, o)) in outputs.into_iter().enumerate() {
        let label = if replicas == 1 { base_label.clone() } else { format!("{base_label}.r{i}") };
        let out = path_for(&a.out, i);
        let record =
            RunRecord { schema_version: RUN_SCHEMA_VERSION, label: label.clone(), config: c.clone(), report: o.report };
        write_json(&out, &record)?;
        if let Some(p) = &a.events {
            let text = events_jsonl(&o.events);
            write_atomic(&path_for(p, i), |w| w.write_all(text.as_bytes()))?;
        }
        if let Some(p) = &a.timeline {
            let text = timeline_csv(&o.timeline);
            write_atomic(&path_for(p, i), |w| w.write_all(text.as_bytes()))?;
        }
        summary.push((label, out, c.sim.seed, record.report));
    }

    if pretty {
        let rows: Vec<Vec<String>> = summary
            .iter()
            .map(|(label, _, seed, r)| {
                vec![
                    label.clone(),
                    seed.to_string(),
                    r.steps.to_string(),
                    r.samples_trained.to_string(),
                    format!("{:.1}", r.makespan_s),
                    f(r.samples_per_second),
                    f(r.bubble_fraction),
                    format!("{:.2}", r.migration_pct),
                    f(r.acceptance_rate),
                ]
            })
            .collect();
        return Ok(table(
            &["label", "seed", "steps", "samples", "makespan_s", "samples/s", "bubble", "migrated%", "acceptance"],
            &rows,
        ));
    }
    let runs: Vec<_> = summary
        .into_iter()
        .map(|(label, out, seed, report)| json!({ "label": label, "out": out, "seed": seed, "report": report }))
        .collect();
    Ok(json_line(&json!({ "schema_version": RUN_SCHEMA_VERSION, "runs": runs })))
}

pub fn report(a: ReportArgs, pretty: bool) -> Output {
    let mut records = Vec::new();
    for p in &a.runs {
        let text = read_text(p)?;
        let r: RunRecord = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
        if r.schema_version != RUN_SCHEMA_VERSION {
            return Err(Failure::Config(format!(
                "{}: run schema {} is not {RUN_SCHEMA_VERSION}",
                p.display(),
                r.schema_version
            )));
        }
        records.push(r);
    }
    let pairs: Vec<(&str, &MetricsReport)> = records.iter().map(|r| (r.label.as_str(), &r.report)).collect();
    let csv = compare_csv(&pairs);
    if let Some(p) = &a.csv {
        write_atomic(p, |w| w.write_all(csv.as_bytes()))?;
    }
    let base = records[0].report.samples_per_second;
    let norm = |r: &MetricsReport| if base > 0.0 { r.samples_per_second / base } else { 0.0 };
    if pretty {
        let rows: Vec<Vec<String>> = records
            .iter()
            .map(|r| {
                let s = &r.report.stage_shares;
                vec![
                    r.label.clone(),
                    r.report.policy.clone(),
                    f(r.report.samples_per_second),
                    format!("{:.3}x", norm(&r.report)),
                    f(r.report.bubble_fraction),
                    format!("{:.2}/{:.2}/{:.2}", s.rollout, s.reward, s.train),
                    format!("{:.1}", r.report.wall_per_10_steps_s),
                ]
            })
            .collect();
        return Ok(table(
            &["label", "policy", "samples/s", "normalized", "bubble", "rollout/reward/train", "s_per_10_steps"],
            &rows,
        ));
    }
    let runs: Vec<_> = records
        .iter()
        .map(|r| json!({ "label": r.label, "normalized_throughput": norm(&r.report), "report": r.report }))
        .collect();
    Ok(json_line(&json!({ "schema_version": REPORT_SCHEMA_VERSION, "runs": runs })))
}
