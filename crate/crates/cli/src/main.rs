//! `rollsim`: generate rollout traces, measure them, plan worker allocations
//! and simulate the RL pipeline. Output is JSON or CSV unless `--pretty`.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rollsim_core::config::{PolicyKind, RunConfig, RUN_SCHEMA_VERSION, SEED_ENV};
use rollsim_core::sim::{EVENT_SCHEMA_VERSION, REPORT_SCHEMA_VERSION};
use rollsim_core::trace::TRACE_SCHEMA_VERSION;

pub const PLAN_SCHEMA_VERSION: u32 = 1;
pub const ANALYSIS_SCHEMA_VERSION: u32 = 1;
pub const TIMELINE_SCHEMA_VERSION: u32 = 1;
pub const PROFILE_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "rollsim", about = "Rollout trace generation, analysis, allocation planning and pipeline simulation")]
struct Cli {
    /// Print human-readable tables instead of machine-readable output.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-epoch trace (JSONL) from a trace spec.
    GenTrace(GenTraceArgs),
    /// Rank-stability and token-similarity metrics of a trace.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Replay a trace through history-based drafting and report acceptance.
    BenchSpec(BenchSpecArgs),
    /// Plan per-group worker counts for one step.
    PlanAlloc(PlanAllocArgs),
    /// Simulate a trace through the rollout, reward and train pipeline.
    RunSim(RunSimArgs),
    /// Compare saved runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenTraceArgs {
    /// Trace spec as TOML, or JSON when the name ends in `.json`.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replaces the seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Predicted vs realized length-rank groups between consecutive epochs.
    Rank(RankArgs),
    /// Prefix-lookup replay of each epoch against the one before it.
    Similarity(SimilarityArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 8)]
    groups: usize,
    /// One epoch pair `PREV,CUR`; every consecutive pair by default.
    #[arg(long, value_parser = parse_pair)]
    epochs: Option<(u32, u32)>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct SimilarityArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 3)]
    prefix: usize,
    /// One epoch pair `PREV,CUR`; every consecutive pair by default.
    #[arg(long, value_parser = parse_pair)]
    epochs: Option<(u32, u32)>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct BenchSpecArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Use the first E epochs: each of epochs 2..=E is replayed against the one before.
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    /// Lookup prefix of the replay.
    #[arg(long, default_value_t = 3)]
    prefix: usize,
    /// Run config whose `spec` section drives the decoding engine.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["lens", "trace"]))]
struct PlanAllocArgs {
    /// Representative group lengths, ascending, comma separated.
    #[arg(long, value_delimiter = ',')]
    lens: Option<Vec<f64>>,
    /// Build ranking groups from this trace instead of `--lens`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// History epoch for `--trace`; the last epoch by default.
    #[arg(long, requires = "trace")]
    epoch: Option<u32>,
    /// Number of ranking groups for `--trace`.
    #[arg(long, default_value_t = 8, requires = "trace")]
    groups: usize,
    /// Rollout workers available.
    #[arg(long)]
    wks: usize,
    #[arg(long, default_value_t = 0.0)]
    t_train: f64,
    #[arg(long, default_value_t = 1)]
    min_wks: usize,
    /// Defaults to wks - (groups - 1).
    #[arg(long)]
    max_wks: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    precision: f64,
    /// `len,dp,seconds` profile table; the analytic model is used otherwise.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Run config whose `cost` section sets the analytic model constants.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rollouts in flight per group; with `--trace` defaults to the largest group's response count.
    #[arg(long)]
    batch: Option<usize>,
    /// Mean draft tokens accepted per verification pass.
    #[arg(long, default_value_t = 0.0)]
    accepted_per_pass: f64,
}

#[derive(Args)]
struct RunSimArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Run config (TOML). Every key is optional; see below.
    #[arg(long)]
    cluster: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<PolicyKind>,
    /// Replaces the seed from the config and from the environment.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Turn speculative decoding off.
    #[arg(long)]
    no_spec: bool,
    #[arg(long)]
    label: Option<String>,
    /// Run record (JSON) consumed by `report`.
    #[arg(long)]
    out: PathBuf,
    /// Event log (JSONL).
    #[arg(long)]
    events: Option<PathBuf>,
    /// Per-worker timeline (CSV).
    #[arg(long)]
    timeline: Option<PathBuf>,
    /// Independent runs with seeds seed, seed+1, ...; file names get `.rN`.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    replicas: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run records written by `run-sim`; throughput is normalized to the first.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Also write the comparison as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once(',').ok_or("expected PREV,CUR")?;
    let a: u32 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: u32 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    Ok((a, b))
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    PolicyKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = PolicyKind::ALL.iter().map(|p| p.name()).collect();
        format!("unknown policy {s:?}, expected one of {}", names.join(", "))
    })
}

fn version_text() -> String {
    format!(
        "{}\nschemas: trace-jsonl {TRACE_SCHEMA_VERSION}, run-json {RUN_SCHEMA_VERSION}, \
         events-jsonl {EVENT_SCHEMA_VERSION}, report {REPORT_SCHEMA_VERSION}, \
         timeline-csv {TIMELINE_SCHEMA_VERSION}, plan-json {PLAN_SCHEMA_VERSION}, \
         analysis {ANALYSIS_SCHEMA_VERSION}, profile-csv {PROFILE_SCHEMA_VERSION}",
        env!("CARGO_PKG_VERSION")
    )
}

fn config_keys_help() -> String {
    let mut s = String::from("Config keys and defaults:\n");
    for (k, v) in RunConfig::documented_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str(&format!("\nEnvironment:\n  {SEED_ENV} overrides sim.seed\n"));
    s
}

fn main() -> ExitCode {
    let cmd = Cli::command().version(version_text()).mut_subcommand("run-sim", |c| c.after_help(config_keys_help()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let pretty = cli.pretty;
    let result = match cli.command {
        Command::GenTrace(a) => commands::gen_trace(a, pretty),
        Command::Analyze(AnalyzeCommand::Rank(a)) => commands::analyze_rank(a, pretty),
        Command::Analyze(AnalyzeCommand::Similarity(a)) => commands::analyze_similarity(a, pretty),
        Command::BenchSpec(a) => commands::bench_spec(a, pretty),
        Command::PlanAlloc(a) => commands::plan_alloc(a, pretty),
        Command::RunSim(a) => commands::run_sim(a, pretty),
        Command::Report(a) => commands::report(a, pretty),
    };
    match result {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.code())
        }
    }
}
