//! Work description and cluster configuration.
//!
//! A workload is a per-rank count of alignment pairs. Each rank's pairs are
//! cut into batches of `batch_size`, and each batch into `subbatches_per_batch`
//! sub-batches of as-equal-as-possible size. Sub-batch boundaries are the
//! protocol's scheduling unit, so this module is the single source of truth
//! for that arithmetic.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Scheduling protocol selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchedulerKind {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "one2all")]
    One2All,
    #[serde(rename = "one2one")]
    One2One,
    #[serde(rename = "opt_one2one")]
    OptOne2One,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::Baseline,
        SchedulerKind::One2All,
        SchedulerKind::One2One,
        SchedulerKind::OptOne2One,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Baseline => "baseline",
            SchedulerKind::One2All => "one2all",
            SchedulerKind::One2One => "one2one",
            SchedulerKind::OptOne2One => "opt_one2one",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(SchedulerKind::Baseline),
            "one2all" => Ok(SchedulerKind::One2All),
            "one2one" => Ok(SchedulerKind::One2One),
            "opt_one2one" => Ok(SchedulerKind::OptOne2One),
            other => Err(ConfigError::Invalid {
                field: "scheduler",
                message: format!(
                    "unknown scheduler {other:?} (expected baseline, one2all, one2one, or opt_one2one)"
                ),
            }),
        }
    }
}

/// Parametric cost model, all fields in seconds.
///
/// A sub-batch of `p` pairs computed on `g` GPUs takes
/// `gpu_alpha + gpu_beta * p / g`. `cpu_gap` is the host-side work between
/// sub-batches, `msg_latency` the wire time of one message, and `preamble`
/// the fixed per-rank pipeline time spent outside alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub gpu_alpha: f64,
    pub gpu_beta: f64,
    pub cpu_gap: f64,
    pub msg_latency: f64,
    pub preamble: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            gpu_alpha: 0.005,
            gpu_beta: 1e-6,
            cpu_gap: 0.002,
            msg_latency: 0.001,
            preamble: 1.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("cost.gpu_alpha", self.gpu_alpha),
            ("cost.gpu_beta", self.gpu_beta),
            ("cost.cpu_gap", self.cpu_gap),
            ("cost.msg_latency", self.msg_latency),
            ("cost.preamble", self.preamble),
        ];
        for (name, value) in fields {
            if !value.is_finite() || value < 0.0 {
                return Err(ConfigError::Invalid {
                    field: name,
                    message: format!("must be finite and non-negative, got {value}"),
                });
            }
        }
        Ok(())
    }
}

fn default_batch_size() -> u64 {
    10_000
}

/// Static description of one simulated cluster run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub num_ranks: usize,
    pub num_gpus: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: u64,
    pub subbatches_per_batch: u64,
    pub scheduler: SchedulerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cost: CostModel,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_ranks == 0 {
            return Err(ConfigError::Invalid {
                field: "num_ranks",
                message: "must be at least 1".into(),
            });
        }
        if self.num_gpus == 0 {
            return Err(ConfigError::Invalid {
                field: "num_gpus",
                message: "must be at least 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid {
                field: "batch_size",
                message: "must be at least 1".into(),
            });
        }
        if self.subbatches_per_batch == 0 {
            return Err(ConfigError::Invalid {
                field: "subbatches_per_batch",
                message: "must be at least 1".into(),
            });
        }
        if self.scheduler == SchedulerKind::Baseline && self.num_ranks != 1 {
            return Err(ConfigError::Invalid {
                field: "scheduler",
                message: format!(
                    "baseline runs a single process; got num_ranks = {}",
                    self.num_ranks
                ),
            });
        }
        self.cost.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: ClusterConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    /// TOML errors carry line/column and the offending key.
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config: {field}: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
}

/// Per-rank pair counts, indexed by rank.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Workload {
    pairs: Vec<u64>,
}

impl Workload {
    pub fn new(pairs: Vec<u64>) -> Self {
        Workload { pairs }
    }

    pub fn num_ranks(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs_for(&self, rank: usize) -> u64 {
        self.pairs[rank]
    }

    pub fn pairs(&self) -> &[u64] {
        &self.pairs
    }

    pub fn total_pairs(&self) -> u64 {
        self.pairs.iter().sum()
    }
}

/// One schedulable unit of work: a slice of a rank's batch.
/// `batch` and `sub` are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubBatch {
    pub rank: usize,
    pub batch: u64,
    pub sub: u64,
    pub pairs: u64,
}

/// Cuts one rank's pairs into batches of `batch_size`, then each batch into
/// `subbatches` near-equal parts (larger parts first). Empty trailing parts
/// are dropped, so every returned sub-batch has at least one pair.
pub fn partition_rank_workload(
    rank: usize,
    pairs: u64,
    batch_size: u64,
    subbatches: u64,
) -> Vec<SubBatch> {
    assert!(batch_size >= 1 && subbatches >= 1);
    let mut out = Vec::new();
    let mut remaining = pairs;
    let mut batch = 1u64;
    while remaining > 0 {
        let in_batch = remaining.min(batch_size);
        let base = in_batch / subbatches;
        let extra = in_batch % subbatches;
        for sub in 1..=subbatches {
            let size = base + u64::from(sub <= extra);
            if size == 0 {
                break; // smaller parts follow; all further parts are empty too
            }
            out.push(SubBatch {
                rank,
                batch,
                sub,
                pairs: size,
            });
        }
        remaining -= in_batch;
        batch += 1;
    }
    out
}

/// Number of batches each rank will run: `ceil(pairs / batch_size)`.
pub fn batch_counts(workload: &Workload, config: &ClusterConfig) -> Vec<u64> {
    workload
        .pairs()
        .iter()
        .map(|&p| p.div_ceil(config.batch_size))
        .collect()
}

/// Splits `total_pairs` across `num_ranks`. With `skew` 0 the split is even,
/// remainder going to the lowest ranks. Positive skew (up to 1) draws
/// per-rank weights in `[1 - skew, 1 + skew]` from a seeded generator, so the
/// imbalance is reproducible; the counts always sum to `total_pairs` exactly.
pub fn generate_synthetic_workload(
    total_pairs: u64,
    num_ranks: usize,
    skew: f64,
    seed: u64,
) -> Workload {
    assert!(num_ranks >= 1, "workload needs at least one rank");
    assert!(
        (0.0..=1.0).contains(&skew),
        "skew must lie in [0, 1], got {skew}"
    );
    if skew == 0.0 {
        let base = total_pairs / num_ranks as u64;
        let extra = total_pairs % num_ranks as u64;
        let pairs = (0..num_ranks as u64).map(|r| base + u64::from(r < extra)).collect();
        return Workload::new(pairs);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0f64, 1.0);
    let weights: Vec<f64> = (0..num_ranks)
        .map(|_| 1.0 + skew * (2.0 * unit.sample(&mut rng) - 1.0))
        .collect();
    let weight_sum: f64 = weights.iter().sum();

    // Largest-remainder apportionment keeps the total exact.
    let mut pairs: Vec<u64> = Vec::with_capacity(num_ranks);
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(num_ranks);
    let mut assigned = 0u64;
    for (rank, w) in weights.iter().enumerate() {
        let share = total_pairs as f64 * w / weight_sum;
        let floor = share.floor() as u64;
        pairs.push(floor);
        assigned += floor;
        fractions.push((rank, share - floor as f64));
    }
    let mut leftover = total_pairs - assigned;
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (rank, _) in fractions {
        if leftover == 0 {
            break;
        }
        pairs[rank] += 1;
        leftover -= 1;
    }
    Workload::new(pairs)
}

#[derive(Debug, thiserror::Error)]
pub enum WorkloadFileError {
    #[error("cannot read workload {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("workload line {line}: expected \"rank,pairs\", got {content:?}")]
    Malformed { line: usize, content: String },
    #[error("workload line {line}: negative count {value:?}")]
    NegativeCount { line: usize, value: String },
    #[error("workload line {line}: rank {rank} listed twice")]
    DuplicateRank { line: usize, rank: usize },
    #[error("workload missing rank {rank} of {expected} (ranks must cover 0..{expected} exactly once)")]
    MissingRank { rank: usize, expected: usize },
    #[error("workload file is empty")]
    Empty,
}

/// Loads a `rank,pairs` file. Every rank `0..n` must appear exactly once,
/// in any order; `n` is inferred from the largest rank present.
pub fn load_workload_file(path: &Path) -> Result<Workload, WorkloadFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| WorkloadFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_workload_str(&text)
}

pub fn parse_workload_str(text: &str) -> Result<Workload, WorkloadFileError> {
    let mut entries: BTreeMap<usize, u64> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.trim();
        if content.is_empty() {
            continue;
        }
        let (rank_s, pairs_s) = content.split_once(',').ok_or(WorkloadFileError::Malformed {
            line,
            content: content.to_string(),
        })?;
        let rank_s = rank_s.trim();
        let pairs_s = pairs_s.trim();
        for field in [rank_s, pairs_s] {
            if field.starts_with('-') {
                return Err(WorkloadFileError::NegativeCount {
                    line,
                    value: field.to_string(),
                });
            }
        }
        let rank: usize = rank_s.parse().map_err(|_| WorkloadFileError::Malformed {
            line,
            content: content.to_string(),
        })?;
        let pairs: u64 = pairs_s.parse().map_err(|_| WorkloadFileError::Malformed {
            line,
            content: content.to_string(),
        })?;
        if entries.insert(rank, pairs).is_some() {
            return Err(WorkloadFileError::DuplicateRank { line, rank });
        }
    }
    if entries.is_empty() {
        return Err(WorkloadFileError::Empty);
    }
    let expected = entries.keys().max().unwrap() + 1;
    for rank in 0..expected {
        if !entries.contains_key(&rank) {
            return Err(WorkloadFileError::MissingRank { rank, expected });
        }
    }
    Ok(Workload::new(entries.into_values().collect()))
}
