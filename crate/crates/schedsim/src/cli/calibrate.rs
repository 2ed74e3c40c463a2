//! Fits the five cost-model parameters to measured runs.
//!
//! Input is a CSV with header `scheduler,n,m,c,pairs,total,alignment,
//! difference`, one measured run per row. Each candidate model simulates
//! every row (uniform synthetic workload of `pairs`, preamble scaled by
//! 1/n because every process loads its own shard of the input) and the
//! objective is the sum of squared relative errors of the simulated
//! difference time, i.e. the non-compute overhead the fit is meant to
//! explain. Parameters that only shape the compute span barely move that
//! objective, so a coordinate is changed only when it strictly improves
//! the fit and keeps its default otherwise.
//!
//! The search itself is a deterministic bounded coordinate scan: per pass
//! each coordinate is evaluated on a 33-point grid over its bracket, the
//! bracket then shrinks to a quarter of its width around the winner, and
//! six passes bring the resolution of the dominant parameters to well
//! under one part in ten thousand of their range.

use std::path::Path;

use crate::schedulers::execute;
use crate::verify::compute_metrics;
use crate::workload::{
    generate_synthetic_workload, ClusterConfig, CostModel, SchedulerKind, Workload,
};

use super::CliError;

pub const POINTS_CSV_HEADER: &str = "scheduler,n,m,c,pairs,total,alignment,difference";

/// One measured run. Times are seconds; `difference` must be positive since
/// the fit works in relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredRun {
    pub scheduler: SchedulerKind,
    pub n: usize,
    pub m: usize,
    pub c: u64,
    pub pairs: u64,
    pub total: f64,
    pub alignment: f64,
    pub difference: f64,
}

pub fn parse_points(text: &str) -> Result<Vec<MeasuredRun>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == POINTS_CSV_HEADER => {}
        Some((_, header)) => {
            return Err(format!(
                "points header {header:?} does not match {POINTS_CSV_HEADER:?}"
            ))
        }
        None => return Err("points file is empty".into()),
    }
    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 8 {
            return Err(format!(
                "points line {line}: expected 8 comma-separated fields, found {}",
                fields.len()
            ));
        }
        let field = |i: usize, name: &str| -> Result<f64, String> {
            fields[i]
                .trim()
                .parse()
                .map_err(|_| format!("points line {line}: bad {name} {:?}", fields[i]))
        };
        let scheduler: SchedulerKind = fields[0]
            .trim()
            .parse()
            .map_err(|e| format!("points line {line}: {e}"))?;
        let n = field(1, "n")? as usize;
        let m = field(2, "m")? as usize;
        let c = field(3, "c")? as u64;
        let pairs = field(4, "pairs")? as u64;
        let total = field(5, "total")?;
        let alignment = field(6, "alignment")?;
        let difference = field(7, "difference")?;
        if n == 0 || m == 0 || c == 0 {
            return Err(format!("points line {line}: n, m and c must be >= 1"));
        }
        if scheduler == SchedulerKind::Baseline && n != 1 {
            return Err(format!(
                "points line {line}: baseline runs a single process, so n must be 1"
            ));
        }
        if difference.is_nan() || difference <= 0.0 {
            return Err(format!(
                "points line {line}: difference must be positive, got {difference}"
            ));
        }
        rows.push(MeasuredRun {
            scheduler,
            n,
            m,
            c,
            pairs,
            total,
            alignment,
            difference,
        });
    }
    if rows.is_empty() {
        return Err("points file has a header but no rows".into());
    }
    Ok(rows)
}

/// Search bounds per coordinate: generous enough for second-scale cluster
/// overheads yet bounded so the scan stays cheap.
const COORDS: [(&str, f64, f64); 5] = [
    ("preamble", 0.0, 600.0),
    ("msg_latency", 0.0, 60.0),
    ("gpu_alpha", 0.0, 0.05),
    ("gpu_beta", 0.0, 2e-5),
    ("cpu_gap", 0.0, 0.05),
];
const GRID_POINTS: usize = 33;
const PASSES: usize = 6;
/// Each pass keeps `bracket_width / SHRINK` on both sides of the winner.
const SHRINK: f64 = 8.0;

fn params_of(cost: &CostModel) -> [f64; 5] {
    [
        cost.preamble,
        cost.msg_latency,
        cost.gpu_alpha,
        cost.gpu_beta,
        cost.cpu_gap,
    ]
}

fn cost_of(params: &[f64; 5]) -> CostModel {
    CostModel {
        preamble: params[0],
        msg_latency: params[1],
        gpu_alpha: params[2],
        gpu_beta: params[3],
        cpu_gap: params[4],
    }
}

/// Simulated difference time for one measured row under a candidate model.
pub fn simulate_difference(run: &MeasuredRun, workload: &Workload, cost: &CostModel) -> f64 {
    let mut cell_cost = *cost;
    cell_cost.preamble = cost.preamble / run.n as f64;
    let config = ClusterConfig {
        num_ranks: run.n,
        num_gpus: run.m,
        batch_size: 10_000,
        subbatches_per_batch: run.c,
        scheduler: run.scheduler,
        seed: 0,
        cost: cell_cost,
    };
    let output = execute(workload, &config).expect("calibration run cannot deadlock");
    compute_metrics(&output.trace)
        .expect("simulated trace is well formed")
        .difference_time
        .as_secs_f64()
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub cost: CostModel,
    /// Final sum of squared relative errors.
    pub objective: f64,
    /// Per input row: (simulated difference, relative error).
    pub rows: Vec<(f64, f64)>,
}

impl FitOutcome {
    /// Root-mean-square relative error over the input rows.
    pub fn rms_relative_error(&self) -> f64 {
        (self.objective / self.rows.len() as f64).sqrt()
    }

    /// A fit that still misses the measurements by more than 50% RMS after
    /// the full search has nothing trustworthy to report.
    pub fn converged(&self) -> bool {
        self.rms_relative_error() <= 0.5
    }
}

fn objective(rows: &[MeasuredRun], workloads: &[Workload], cost: &CostModel) -> f64 {
    rows.iter()
        .zip(workloads)
        .map(|(row, workload)| {
            let rel =
                (simulate_difference(row, workload, cost) - row.difference) / row.difference;
            rel * rel
        })
        .sum()
}

pub fn fit(rows: &[MeasuredRun]) -> Result<FitOutcome, String> {
    if rows.len() < COORDS.len() {
        return Err(format!(
            "under-determined fit: {} rows for {} free parameters; add more measured runs",
            rows.len(),
            COORDS.len()
        ));
    }
    let workloads: Vec<Workload> = rows
        .iter()
        .map(|r| generate_synthetic_workload(r.pairs, r.n, 0.0, 0))
        .collect();

    let mut params = params_of(&CostModel::default());
    let mut best = objective(rows, &workloads, &cost_of(&params));
    let mut brackets: [(f64, f64); 5] = COORDS.map(|(_, lo, hi)| (lo, hi));

    for _pass in 0..PASSES {
        for coord in 0..COORDS.len() {
            let (lo, hi) = brackets[coord];
            let mut winner = params[coord];
            for step in 0..GRID_POINTS {
                let x = lo + (hi - lo) * step as f64 / (GRID_POINTS - 1) as f64;
                let mut candidate = params;
                candidate[coord] = x;
                let value = objective(rows, &workloads, &cost_of(&candidate));
                if value + 1e-12 < best {
                    best = value;
                    winner = x;
                }
            }
            params[coord] = winner;
            let half = (hi - lo) / SHRINK;
            let (floor, ceil) = (COORDS[coord].1, COORDS[coord].2);
            brackets[coord] = ((winner - half).max(floor), (winner + half).min(ceil));
        }
    }

    let cost = cost_of(&params);
    let fitted_rows = rows
        .iter()
        .zip(&workloads)
        .map(|(row, workload)| {
            let sim = simulate_difference(row, workload, &cost);
            (sim, (sim - row.difference) / row.difference)
        })
        .collect();
    Ok(FitOutcome {
        cost,
        objective: best,
        rows: fitted_rows,
    })
}

pub fn cmd_calibrate(points: &Path, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(points)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", points.display())))?;
    let rows = parse_points(&text).map_err(CliError::Input)?;
    let outcome = fit(&rows).map_err(CliError::Input)?;

    let cost = &outcome.cost;
    println!(
        "fitted cost model over {} rows (objective {:.6}):",
        rows.len(),
        outcome.objective
    );
    println!("  gpu_alpha   {:.9}", cost.gpu_alpha);
    println!("  gpu_beta    {:.12}", cost.gpu_beta);
    println!("  cpu_gap     {:.9}", cost.cpu_gap);
    println!("  msg_latency {:.6}", cost.msg_latency);
    println!("  preamble    {:.6}", cost.preamble);
    for (row, &(sim, rel)) in rows.iter().zip(&outcome.rows) {
        println!(
            "  {} n={} m={} c={}: measured {:.6} simulated {:.6} residual {:+.2}%",
            row.scheduler,
            row.n,
            row.m,
            row.c,
            row.difference,
            sim,
            rel * 100.0
        );
    }
    if !outcome.converged() {
        return Err(CliError::Input(format!(
            "fit did not converge: {:.0}% RMS relative error remains; \
             best-so-far parameters and residuals are printed above",
            outcome.rms_relative_error() * 100.0
        )));
    }

    let config = ClusterConfig {
        num_ranks: rows[0].n,
        num_gpus: rows[0].m,
        batch_size: 10_000,
        subbatches_per_batch: rows[0].c,
        scheduler: rows[0].scheduler,
        seed: 0,
        cost: *cost,
    };
    let body = toml::to_string_pretty(&config)
        .map_err(|e| CliError::Io(format!("cannot serialize fitted config: {e}")))?;
    let fragment = format!(
        "# cost model fitted from {} ({} rows)\n\
         # preamble is the full single-process load time; sweeps divide it by\n\
         # the rank count when preamble_scaling = \"inverse_n\" (the default)\n\
         {body}",
        points.display(),
        rows.len()
    );
    std::fs::write(out, fragment)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", out.display())))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
