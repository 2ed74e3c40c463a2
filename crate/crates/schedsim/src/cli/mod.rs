//! Command-line front end: single runs, grid sweeps, trace re-verification
//! and cost-model calibration.

pub mod calibrate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::schedulers::execute;
use crate::simkernel::trace::Trace;
use crate::verify::{check_all, compute_metrics, metrics_csv_line, Metrics, METRICS_CSV_HEADER};
use crate::workload::{
    generate_synthetic_workload, load_workload_file, ClusterConfig, CostModel, SchedulerKind,
    Workload,
};

/// Failure modes with fixed process exit codes, so scripts can tell a bad
/// input (2) from a deadlocked protocol (3) or a violated invariant (4).
#[derive(Debug)]
pub enum CliError {
    Io(String),
    Input(String),
    Deadlock(String),
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Input(_) => 2,
            CliError::Deadlock(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Input(m) | CliError::Deadlock(m) | CliError::Invariant(m) => m,
        }
    }

    fn in_cell(self, cell: &str) -> CliError {
        let wrap = |m| format!("{cell}: {m}");
        match self {
            CliError::Io(m) => CliError::Io(wrap(m)),
            CliError::Input(m) => CliError::Input(wrap(m)),
            CliError::Deadlock(m) => CliError::Deadlock(wrap(m)),
            CliError::Invariant(m) => CliError::Invariant(wrap(m)),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "schedsim",
    version,
    about = "deterministic simulator for multi-process GPU batch scheduling"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one run, verify it and write the event trace.
    Run(RunArgs),
    /// Simulate a grid of configurations and write one metrics row per run.
    Sweep(SweepArgs),
    /// Re-check a trace file against all invariants and print its metrics.
    Verify(VerifyArgs),
    /// Fit the cost model to measured runs and write it as a run config.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Cluster config TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Workload CSV file, or `synthetic:TOTAL[:SKEW]`.
    #[arg(long)]
    workload: String,
    /// Where to write the trace TSV.
    #[arg(long, default_value = "trace.tsv")]
    out: PathBuf,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep spec TOML file.
    spec: PathBuf,
    /// Where to write the CSV; overrides the `output` key of the sweep file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Trace TSV written by `run`.
    trace: PathBuf,
    /// The config the trace was produced with.
    #[arg(long)]
    config: PathBuf,
    /// The workload the trace was produced with.
    #[arg(long)]
    workload: String,
    /// Seed for re-deriving a synthetic workload (defaults to the config's).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Measured runs CSV with header
    /// `scheduler,n,m,c,pairs,total,alignment,difference`.
    points: PathBuf,
    /// Where to write the fitted config.
    #[arg(long, default_value = "calibrated.toml")]
    out: PathBuf,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Calibrate(args) => calibrate::cmd_calibrate(&args.points, &args.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}

fn metrics_line(metrics: &Metrics) -> String {
    format!(
        "total {} alignment {} difference {} handoffs {} exchange {} max_conc {}",
        metrics.total_time,
        metrics.alignment_time,
        metrics.difference_time,
        metrics.handoff_messages,
        metrics.exchange_messages,
        metrics.max_concurrent_computes,
    )
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let mut config =
        ClusterConfig::load(&args.config).map_err(|e| CliError::Input(e.to_string()))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let workload = resolve_workload(&args.workload, config.num_ranks, config.seed)?;
    let output =
        execute(&workload, &config).map_err(|e| CliError::Deadlock(e.to_string()))?;
    check_all(&output.trace).map_err(|e| CliError::Invariant(e.to_string()))?;
    let metrics =
        compute_metrics(&output.trace).map_err(|e| CliError::Invariant(e.to_string()))?;
    output
        .trace
        .write_tsv(&args.out)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", args.out.display())))?;
    eprintln!("wrote {}", args.out.display());
    println!("{}", metrics_line(&metrics));
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let config =
        ClusterConfig::load(&args.config).map_err(|e| CliError::Input(e.to_string()))?;
    let seed = args.seed.unwrap_or(config.seed);
    let workload = resolve_workload(&args.workload, config.num_ranks, seed)?;
    let trace = Trace::read_tsv(&args.trace, config, workload)
        .map_err(|e| CliError::Input(e.to_string()))?;
    check_all(&trace).map_err(|e| CliError::Invariant(e.to_string()))?;
    let metrics = compute_metrics(&trace).map_err(|e| CliError::Invariant(e.to_string()))?;
    println!("{}", metrics_line(&metrics));
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let spec = SweepSpec::load(&args.spec)?;
    let csv = run_sweep(&spec)?;
    let out = args
        .out
        .clone()
        .or_else(|| spec.output.clone())
        .unwrap_or_else(|| PathBuf::from("sweep.csv"));
    std::fs::write(&out, &csv)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", out.display())))?;
    eprintln!("wrote {} rows to {}", csv.lines().count() - 1, out.display());
    Ok(())
}

/// Parses a workload argument: either a `rank,pairs` CSV file or
/// `synthetic:TOTAL[:SKEW]`, where TOTAL accepts plain or scientific
/// notation (`synthetic:1e6:0.3`).
pub fn resolve_workload(spec: &str, num_ranks: usize, seed: u64) -> Result<Workload, CliError> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let (total, skew) = parse_synthetic_args(rest).map_err(CliError::Input)?;
        return Ok(generate_synthetic_workload(total, num_ranks, skew, seed));
    }
    let workload =
        load_workload_file(Path::new(spec)).map_err(|e| CliError::Input(e.to_string()))?;
    if workload.num_ranks() != num_ranks {
        return Err(CliError::Input(format!(
            "workload file {spec} covers {} ranks but the config expects {num_ranks}",
            workload.num_ranks(),
        )));
    }
    Ok(workload)
}

fn parse_synthetic_args(rest: &str) -> Result<(u64, f64), String> {
    let mut parts = rest.split(':');
    let total_txt = parts.next().unwrap_or("");
    let total = parse_total(total_txt)
        .ok_or_else(|| format!("bad synthetic total {total_txt:?}; expected e.g. 100000 or 1e6"))?;
    let skew = match parts.next() {
        None => 0.0,
        Some(txt) => {
            let skew: f64 = txt
                .parse()
                .map_err(|_| format!("bad synthetic skew {txt:?}"))?;
            if !(0.0..=1.0).contains(&skew) {
                return Err(format!("synthetic skew must lie in [0, 1], got {skew}"));
            }
            skew
        }
    };
    if parts.next().is_some() {
        return Err(format!(
            "too many fields in synthetic workload spec \"synthetic:{rest}\""
        ));
    }
    Ok((total, skew))
}

fn parse_total(txt: &str) -> Option<u64> {
    if let Ok(v) = txt.parse::<u64>() {
        return Some(v);
    }
    let v: f64 = txt.parse().ok()?;
    if !v.is_finite() || v < 0.0 || v > u64::MAX as f64 {
        return None;
    }
    let rounded = v.round();
    if (v - rounded).abs() > 1e-6 * rounded.max(1.0) {
        return None; // fractional pair counts are almost certainly a typo
    }
    Some(rounded as u64)
}

/// How the fixed startup cost behaves as ranks are added: with `inverse_n`
/// every process loads a 1/n shard of the input, with `constant` each
/// process pays the full cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreambleScaling {
    #[default]
    InverseN,
    Constant,
}

impl PreambleScaling {
    pub fn scaled(self, base: f64, num_ranks: usize) -> f64 {
        match self {
            PreambleScaling::InverseN => base / num_ranks as f64,
            PreambleScaling::Constant => base,
        }
    }
}

/// Grid description for `sweep`. Rows are emitted in (scheduler, ranks,
/// gpus, repetition) order; repetitions vary the workload seed.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub schedulers: Vec<SchedulerKind>,
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    #[serde(default = "default_gpus")]
    pub gpus: Vec<usize>,
    #[serde(default = "default_subbatches")]
    pub subbatches_per_batch: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: u64,
    /// Same syntax as the `--workload` flag.
    pub workload: String,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preamble_scaling: PreambleScaling,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_ranks() -> Vec<usize> {
    vec![1, 4, 9, 16, 25]
}

fn default_gpus() -> Vec<usize> {
    vec![1, 2, 4]
}

fn default_subbatches() -> u64 {
    4
}

fn default_batch_size() -> u64 {
    10_000
}

fn default_repetitions() -> usize {
    1
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<SweepSpec, CliError> {
        let spec: SweepSpec =
            toml::from_str(text).map_err(|e| CliError::Input(format!("sweep spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<SweepSpec, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        SweepSpec::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Input(format!("sweep spec: {m}")));
        if self.schedulers.is_empty() {
            return bad("schedulers list is empty".into());
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return bad("ranks must be a non-empty list of values >= 1".into());
        }
        if self.gpus.is_empty() || self.gpus.contains(&0) {
            return bad("gpus must be a non-empty list of values >= 1".into());
        }
        if self.subbatches_per_batch == 0 {
            return bad("subbatches_per_batch must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        self.cost
            .validate()
            .map_err(|e| CliError::Input(format!("sweep spec: {e}")))?;
        if let Some(rest) = self.workload.strip_prefix("synthetic:") {
            parse_synthetic_args(rest)
                .map_err(|m| CliError::Input(format!("sweep spec: {m}")))?;
        }
        Ok(())
    }
}

/// Runs the whole grid and returns the CSV text. Every cell is verified
/// before its row is emitted; the first bad cell aborts the sweep with an
/// error naming it. The single-process scheduler only makes sense at one
/// rank, so its cells with more ranks are skipped rather than rejected.
pub fn run_sweep(spec: &SweepSpec) -> Result<String, CliError> {
    spec.validate()?;
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    for &scheduler in &spec.schedulers {
        for &n in &spec.ranks {
            if scheduler == SchedulerKind::Baseline && n != 1 {
                continue;
            }
            for &m in &spec.gpus {
                for rep in 0..spec.repetitions {
                    let cell = format!("cell scheduler={scheduler} n={n} m={m} rep={rep}");
                    let seed = spec.seed.wrapping_add(rep as u64);
                    let mut cost = spec.cost;
                    cost.preamble = spec.preamble_scaling.scaled(cost.preamble, n);
                    let config = ClusterConfig {
                        num_ranks: n,
                        num_gpus: m,
                        batch_size: spec.batch_size,
                        subbatches_per_batch: spec.subbatches_per_batch,
                        scheduler,
                        seed,
                        cost,
                    };
                    config
                        .validate()
                        .map_err(|e| CliError::Input(format!("{cell}: {e}")))?;
                    let workload = resolve_workload(&spec.workload, n, seed)
                        .map_err(|e| e.in_cell(&cell))?;
                    let output = execute(&workload, &config)
                        .map_err(|e| CliError::Deadlock(format!("{cell}: {e}")))?;
                    check_all(&output.trace)
                        .map_err(|e| CliError::Invariant(format!("{cell}: {e}")))?;
                    let metrics = compute_metrics(&output.trace)
                        .map_err(|e| CliError::Invariant(format!("{cell}: {e}")))?;
                    csv.push_str(&metrics_csv_line(&metrics, &config));
                    csv.push('\n');
                }
            }
        }
    }
    Ok(csv)
}
