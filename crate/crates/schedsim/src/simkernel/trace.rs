//! Event traces: the kernel's complete, totally ordered record of one run.
//!
//! Export format is one record per line,
//! `time<TAB>rank<TAB>kind<TAB>gpus<TAB>rank.batch.sub`, with time printed
//! with a fixed 6-digit fraction. `gpus` is a `+`-joined id list or `-`;
//! the sub-batch column is `-` for events that reference none. The format
//! is stable so traces can be checked against golden files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::simkernel::{GpuId, RankId};
use crate::time::SimTime;
use crate::workload::{ClusterConfig, SubBatch, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    SendPosted,
    RecvCompleted,
    HoldAcquired,
    ComputeStart,
    ComputeEnd,
    HoldReleased,
    LocalWorkStart,
    LocalWorkEnd,
    RankFinished,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::SendPosted => "SendPosted",
            EventKind::RecvCompleted => "RecvCompleted",
            EventKind::HoldAcquired => "HoldAcquired",
            EventKind::ComputeStart => "ComputeStart",
            EventKind::ComputeEnd => "ComputeEnd",
            EventKind::HoldReleased => "HoldReleased",
            EventKind::LocalWorkStart => "LocalWorkStart",
            EventKind::LocalWorkEnd => "LocalWorkEnd",
            EventKind::RankFinished => "RankFinished",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "SendPosted" => EventKind::SendPosted,
            "RecvCompleted" => EventKind::RecvCompleted,
            "HoldAcquired" => EventKind::HoldAcquired,
            "ComputeStart" => EventKind::ComputeStart,
            "ComputeEnd" => EventKind::ComputeEnd,
            "HoldReleased" => EventKind::HoldReleased,
            "LocalWorkStart" => EventKind::LocalWorkStart,
            "LocalWorkEnd" => EventKind::LocalWorkEnd,
            "RankFinished" => EventKind::RankFinished,
            _ => return Err(()),
        })
    }
}

/// Identity of one sub-batch, printed as `rank.batch.sub` (batch and sub are
/// 1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubBatchId {
    pub rank: RankId,
    pub batch: u64,
    pub sub: u64,
}

impl From<&SubBatch> for SubBatchId {
    fn from(s: &SubBatch) -> Self {
        SubBatchId {
            rank: s.rank,
            batch: s.batch,
            sub: s.sub,
        }
    }
}

impl fmt::Display for SubBatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.rank, self.batch, self.sub)
    }
}

impl FromStr for SubBatchId {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut it = s.split('.');
        let rank = it.next().ok_or(())?.parse().map_err(|_| ())?;
        let batch = it.next().ok_or(())?.parse().map_err(|_| ())?;
        let sub = it.next().ok_or(())?.parse().map_err(|_| ())?;
        if it.next().is_some() {
            return Err(());
        }
        Ok(SubBatchId { rank, batch, sub })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: SimTime,
    pub rank: RankId,
    pub kind: EventKind,
    /// GPUs involved, sorted; empty for non-hold/compute events.
    pub gpus: Vec<GpuId>,
    pub subbatch: Option<SubBatchId>,
    /// Emission index within this rank; breaks ordering ties at equal times.
    pub seq: u64,
}

impl TraceEvent {
    fn tsv_line(&self, out: &mut String) {
        use fmt::Write;
        write!(out, "{}\t{}\t{}\t", self.time, self.rank, self.kind).unwrap();
        if self.gpus.is_empty() {
            out.push('-');
        } else {
            for (i, g) in self.gpus.iter().enumerate() {
                if i > 0 {
                    out.push('+');
                }
                write!(out, "{g}").unwrap();
            }
        }
        out.push('\t');
        match &self.subbatch {
            Some(id) => write!(out, "{id}").unwrap(),
            None => out.push('-'),
        }
        out.push('\n');
    }
}

/// Totally ordered event list plus the inputs that produced it. Order is
/// (time, rank, per-rank sequence number).
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub config: ClusterConfig,
    pub workload: Workload,
}

impl Trace {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            event.tsv_line(&mut out);
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_tsv())
    }

    /// Rebuilds a trace from its TSV export. The file carries only events,
    /// so the config and workload of the run must be supplied alongside.
    pub fn parse_tsv(
        text: &str,
        config: ClusterConfig,
        workload: Workload,
    ) -> Result<Trace, TraceParseError> {
        let mut events = Vec::new();
        let mut seqs: BTreeMap<RankId, u64> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 5 {
                return Err(TraceParseError::FieldCount {
                    line,
                    found: fields.len(),
                });
            }
            let bad = |field: &'static str, value: &str| TraceParseError::Field {
                line,
                field,
                value: value.to_string(),
            };
            let time: SimTime = fields[0].parse().map_err(|_| bad("time", fields[0]))?;
            let rank: RankId = fields[1].parse().map_err(|_| bad("rank", fields[1]))?;
            let kind: EventKind = fields[2].parse().map_err(|_| bad("kind", fields[2]))?;
            let gpus: Vec<GpuId> = if fields[3] == "-" {
                vec![]
            } else {
                fields[3]
                    .split('+')
                    .map(|g| g.parse().map_err(|_| bad("gpus", fields[3])))
                    .collect::<Result<_, _>>()?
            };
            let subbatch: Option<SubBatchId> = if fields[4] == "-" {
                None
            } else {
                Some(fields[4].parse().map_err(|_| bad("subbatch", fields[4]))?)
            };
            let seq = seqs.entry(rank).or_insert(0);
            events.push(TraceEvent {
                time,
                rank,
                kind,
                gpus,
                subbatch,
                seq: *seq,
            });
            *seq += 1;
        }
        Ok(Trace {
            events,
            config,
            workload,
        })
    }

    pub fn read_tsv(
        path: &Path,
        config: ClusterConfig,
        workload: Workload,
    ) -> Result<Trace, TraceParseError> {
        let text = std::fs::read_to_string(path).map_err(|source| TraceParseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_tsv(&text, config, workload)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceParseError {
    #[error("cannot read trace {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("trace line {line}: expected 5 tab-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("trace line {line}: bad {field} field {value:?}")]
    Field {
        line: usize,
        field: &'static str,
        value: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceShapeError {
    #[error("rank {rank}: ComputeEnd at {time} without a matching ComputeStart")]
    EndWithoutStart { rank: RankId, time: SimTime },
    #[error("rank {rank}: ComputeStart at {time} while a compute is already open")]
    NestedStart { rank: RankId, time: SimTime },
    #[error("rank {rank}: ComputeStart at {time} never ends")]
    UnmatchedStart { rank: RankId, time: SimTime },
}

/// Per-GPU busy intervals `[start, end)` from ComputeStart/ComputeEnd pairs,
/// sorted by start. Every GPU of the config appears, idle ones with an empty
/// list. Fails on traces whose compute events do not pair up.
pub fn resource_busy_intervals(
    trace: &Trace,
) -> Result<BTreeMap<GpuId, Vec<(SimTime, SimTime)>>, TraceShapeError> {
    let mut busy: BTreeMap<GpuId, Vec<(SimTime, SimTime)>> = (0..trace.config.num_gpus)
        .map(|g| (g, Vec::new()))
        .collect();
    let mut open: BTreeMap<RankId, (SimTime, Vec<GpuId>)> = BTreeMap::new();
    for event in &trace.events {
        match event.kind {
            EventKind::ComputeStart => {
                if open.contains_key(&event.rank) {
                    return Err(TraceShapeError::NestedStart {
                        rank: event.rank,
                        time: event.time,
                    });
                }
                open.insert(event.rank, (event.time, event.gpus.clone()));
            }
            EventKind::ComputeEnd => {
                let (start, gpus) =
                    open.remove(&event.rank)
                        .ok_or(TraceShapeError::EndWithoutStart {
                            rank: event.rank,
                            time: event.time,
                        })?;
                for gpu in gpus {
                    busy.entry(gpu).or_default().push((start, event.time));
                }
            }
            _ => {}
        }
    }
    if let Some((&rank, &(start, _))) = open.iter().next() {
        return Err(TraceShapeError::UnmatchedStart { rank, time: start });
    }
    for intervals in busy.values_mut() {
        intervals.sort_unstable();
    }
    Ok(busy)
}
