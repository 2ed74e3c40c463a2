//! Deterministic virtual-time execution kernel.
//!
//! One sequential program per rank runs over blocking source-matched
//! receives, buffered non-blocking sends, and all-or-nothing exclusive GPU
//! holds. The kernel drives the programs with a wake queue ordered by
//! (time, rank); every rule that breaks a tie does so by lowest rank, so a
//! run is a pure function of its inputs and two runs produce byte-identical
//! traces.

pub mod trace;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;

use crate::time::SimTime;
use crate::workload::{ClusterConfig, Workload};
use trace::{EventKind, SubBatchId, Trace, TraceEvent};

pub type RankId = usize;
pub type GpuId = usize;

/// Message content. `Token` is the bare handoff signal; `BatchCount` carries
/// a rank's batch total during the startup exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    Token,
    BatchCount(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub src: RankId,
    pub dst: RankId,
    pub payload: Payload,
    pub send_time: SimTime,
    pub deliver_time: SimTime,
}

/// One step of a rank program. `tag` annotates the trace event with the
/// sub-batch the step belongs to; it has no semantic effect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send {
        dst: RankId,
        payload: Payload,
        tag: Option<SubBatchId>,
    },
    Recv {
        src: RankId,
    },
    HoldAndCompute {
        gpus: Vec<GpuId>,
        duration: SimTime,
        tag: Option<SubBatchId>,
    },
    LocalWork {
        duration: SimTime,
    },
    Finish,
}

/// A rank as a sequential state machine. The kernel calls `next_action`
/// whenever the rank is free to act; after a `Recv` completes, the delivered
/// payload is passed to the following call.
///
/// A program must yield `Finish` exactly once, as its final action.
pub trait RankProgram {
    fn rank(&self) -> RankId;
    fn next_action(&mut self, received: Option<Payload>) -> Action;
}

/// Replays a fixed action list. Payloads received along the way are kept for
/// later inspection.
#[derive(Debug)]
pub struct ScriptProgram {
    rank: RankId,
    actions: VecDeque<Action>,
    pub received: Vec<Payload>,
}

impl ScriptProgram {
    pub fn new(rank: RankId, actions: Vec<Action>) -> Self {
        assert!(
            matches!(actions.last(), Some(Action::Finish)),
            "scripts must end with Finish"
        );
        ScriptProgram {
            rank,
            actions: actions.into(),
            received: Vec::new(),
        }
    }
}

impl RankProgram for ScriptProgram {
    fn rank(&self) -> RankId {
        self.rank
    }

    fn next_action(&mut self, received: Option<Payload>) -> Action {
        if let Some(payload) = received {
            self.received.push(payload);
        }
        self.actions.pop_front().expect("script ran past Finish")
    }
}

/// Why a rank is stuck, for deadlock reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WaitCause {
    Message { from: RankId },
    Gpus { gpus: Vec<GpuId>, held_by: Vec<(GpuId, RankId)> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedInfo {
    pub rank: RankId,
    pub cause: WaitCause,
}

impl fmt::Display for BlockedInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.cause {
            WaitCause::Message { from } => {
                write!(f, "rank {} blocked on recv from rank {}", self.rank, from)
            }
            WaitCause::Gpus { gpus, held_by } => {
                write!(f, "rank {} blocked on gpus {:?}", self.rank, gpus)?;
                if !held_by.is_empty() {
                    write!(f, " held by ")?;
                    for (i, (gpu, owner)) in held_by.iter().enumerate() {
                        if i > 0 {
                            write!(f, ", ")?;
                        }
                        write!(f, "rank {owner} (gpu {gpu})")?;
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug)]
pub enum SimError {
    /// Every unfinished rank is blocked and no message or release can free
    /// it. Carries the wait-for relation at the moment of the stall.
    Deadlock { blocked: Vec<BlockedInfo> },
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Deadlock { blocked } => {
                write!(f, "deadlock detected: ")?;
                for (i, info) in blocked.iter().enumerate() {
                    if i > 0 {
                        write!(f, "; ")?;
                    }
                    write!(f, "{info}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for SimError {}

/// Everything a finished run produces: the trace, the full message log, and
/// the programs themselves (so callers can read state a program accumulated,
/// e.g. counts learned during the startup exchange).
#[derive(Debug)]
pub struct RunOutput<P> {
    pub trace: Trace,
    pub messages: Vec<Message>,
    pub programs: Vec<P>,
}

#[derive(Debug)]
struct HoldRequest {
    gpus: Vec<GpuId>,
    duration: SimTime,
    tag: Option<SubBatchId>,
}

#[derive(Debug)]
enum RankState {
    /// Free to take its next action.
    Idle,
    WaitRecv { src: RankId, since: SimTime },
    WaitHold(HoldRequest),
    Computing { until: SimTime, gpus: Vec<GpuId>, tag: Option<SubBatchId> },
    Working { until: SimTime },
    Finished,
}

struct Kernel<P: RankProgram> {
    programs: Vec<P>,
    latency: SimTime,
    states: Vec<RankState>,
    pending_payload: Vec<Option<Payload>>,
    channels: BTreeMap<(RankId, RankId), VecDeque<Message>>,
    gpu_owner: Vec<Option<RankId>>,
    /// (request time, rank) of every rank in `WaitHold`.
    hold_queue: Vec<(SimTime, RankId)>,
    wakes: BinaryHeap<Reverse<(SimTime, RankId)>>,
    events: Vec<TraceEvent>,
    seqs: Vec<u64>,
    last_time: Vec<SimTime>,
    messages: Vec<Message>,
    finished: usize,
}

/// Runs one program per rank to completion under `config`'s cost model.
///
/// `Recv(src)` blocks until a message from exactly `src` is delivered;
/// messages on a fixed (src, dst) channel arrive in send order. `Send` is
/// buffered and returns immediately. `HoldAndCompute` acquires its whole GPU
/// set atomically — requests are granted in (request time, rank) order, a
/// request whose set is busy does not block later requests for free GPUs.
///
/// Fails with [`SimError::Deadlock`] when unfinished ranks remain but
/// nothing can wake them.
pub fn run_programs<P: RankProgram>(
    programs: Vec<P>,
    config: &ClusterConfig,
    workload: &Workload,
) -> Result<RunOutput<P>, SimError> {
    let n = config.num_ranks;
    assert_eq!(programs.len(), n, "need exactly one program per rank");
    for (i, p) in programs.iter().enumerate() {
        assert_eq!(p.rank(), i, "program {i} reports rank {}", p.rank());
    }

    let mut kernel = Kernel {
        programs,
        latency: SimTime::from_secs_f64(config.cost.msg_latency),
        states: (0..n).map(|_| RankState::Idle).collect(),
        pending_payload: vec![None; n],
        channels: BTreeMap::new(),
        gpu_owner: vec![None; config.num_gpus],
        hold_queue: Vec::new(),
        wakes: BinaryHeap::new(),
        events: Vec::new(),
        seqs: vec![0; n],
        last_time: vec![SimTime::ZERO; n],
        messages: Vec::new(),
        finished: 0,
    };

    for rank in 0..n {
        kernel.wakes.push(Reverse((SimTime::ZERO, rank)));
    }
    while let Some(Reverse((time, rank))) = kernel.wakes.pop() {
        kernel.attend(rank, time);
    }

    if kernel.finished < n {
        return Err(SimError::Deadlock {
            blocked: kernel.blocked_report(),
        });
    }

    let mut events = kernel.events;
    events.sort_by(|a, b| {
        (a.time, a.rank, a.seq).cmp(&(b.time, b.rank, b.seq))
    });
    Ok(RunOutput {
        trace: Trace {
            events,
            config: config.clone(),
            workload: workload.clone(),
        },
        messages: kernel.messages,
        programs: kernel.programs,
    })
}

impl<P: RankProgram> Kernel<P> {
    fn emit(
        &mut self,
        rank: RankId,
        time: SimTime,
        kind: EventKind,
        gpus: Vec<GpuId>,
        subbatch: Option<SubBatchId>,
    ) {
        debug_assert!(time >= self.last_time[rank], "rank {rank} time went backwards");
        self.last_time[rank] = time;
        let seq = self.seqs[rank];
        self.seqs[rank] += 1;
        self.events.push(TraceEvent {
            time,
            rank,
            kind,
            gpus,
            subbatch,
            seq,
        });
    }

    /// Drives `rank` forward as far as it can go at time `now`. Wakes are
    /// hints: a stale one finds nothing to do and returns.
    fn attend(&mut self, rank: RankId, now: SimTime) {
        loop {
            match &self.states[rank] {
                RankState::Finished => return,
                // Granting happens in try_grants exclusively.
                RankState::WaitHold(_) => return,
                RankState::Computing { until, .. } => {
                    let until = *until;
                    if until > now {
                        return;
                    }
                    self.release_hold(rank, until);
                }
                RankState::Working { until } => {
                    let until = *until;
                    if until > now {
                        return;
                    }
                    self.emit(rank, until, EventKind::LocalWorkEnd, vec![], None);
                    self.states[rank] = RankState::Idle;
                }
                RankState::WaitRecv { src, since } => {
                    let (src, since) = (*src, *since);
                    let channel = self.channels.entry((src, rank)).or_default();
                    match channel.front() {
                        Some(msg) if msg.deliver_time <= now => {
                            let msg = channel.pop_front().unwrap();
                            let when = since.max(msg.deliver_time);
                            self.emit(rank, when, EventKind::RecvCompleted, vec![], None);
                            self.pending_payload[rank] = Some(msg.payload);
                            self.states[rank] = RankState::Idle;
                        }
                        // Either in flight (a wake at deliver_time already
                        // exists) or not yet sent (the send will wake us).
                        _ => return,
                    }
                }
                RankState::Idle => {
                    let received = self.pending_payload[rank].take();
                    match self.programs[rank].next_action(received) {
                        Action::Send { dst, payload, tag } => {
                            assert_ne!(dst, rank, "rank {rank} sending to itself");
                            assert!(dst < self.states.len(), "send to unknown rank {dst}");
                            let msg = Message {
                                src: rank,
                                dst,
                                payload,
                                send_time: now,
                                deliver_time: now + self.latency,
                            };
                            self.emit(rank, now, EventKind::SendPosted, vec![], tag);
                            self.wakes.push(Reverse((msg.deliver_time, dst)));
                            self.channels
                                .entry((rank, dst))
                                .or_default()
                                .push_back(msg.clone());
                            self.messages.push(msg);
                        }
                        Action::Recv { src } => {
                            assert_ne!(src, rank, "rank {rank} receiving from itself");
                            assert!(src < self.states.len(), "recv from unknown rank {src}");
                            self.states[rank] = RankState::WaitRecv { src, since: now };
                            // Loop again: an already-delivered message
                            // completes the receive immediately.
                        }
                        Action::HoldAndCompute {
                            mut gpus,
                            duration,
                            tag,
                        } => {
                            gpus.sort_unstable();
                            gpus.dedup();
                            assert!(!gpus.is_empty(), "hold needs at least one GPU");
                            assert!(
                                *gpus.last().unwrap() < self.gpu_owner.len(),
                                "GPU id out of range"
                            );
                            self.states[rank] = RankState::WaitHold(HoldRequest {
                                gpus,
                                duration,
                                tag,
                            });
                            self.hold_queue.push((now, rank));
                            self.try_grants(now);
                            return;
                        }
                        Action::LocalWork { duration } => {
                            self.emit(rank, now, EventKind::LocalWorkStart, vec![], None);
                            if duration.is_zero() {
                                self.emit(rank, now, EventKind::LocalWorkEnd, vec![], None);
                            } else {
                                let until = now + duration;
                                self.states[rank] = RankState::Working { until };
                                self.wakes.push(Reverse((until, rank)));
                                return;
                            }
                        }
                        Action::Finish => {
                            self.emit(rank, now, EventKind::RankFinished, vec![], None);
                            self.states[rank] = RankState::Finished;
                            self.finished += 1;
                            return;
                        }
                    }
                }
            }
        }
    }

    fn release_hold(&mut self, rank: RankId, at: SimTime) {
        let RankState::Computing { gpus, tag, .. } =
            std::mem::replace(&mut self.states[rank], RankState::Idle)
        else {
            unreachable!("release without hold")
        };
        self.emit(rank, at, EventKind::ComputeEnd, gpus.clone(), tag);
        self.emit(rank, at, EventKind::HoldReleased, gpus.clone(), tag);
        for gpu in &gpus {
            self.gpu_owner[*gpu] = None;
        }
        self.try_grants(at);
    }

    /// Grants waiting hold requests whose whole GPU set is free, in
    /// (request time, rank) order. A stuck request does not hold up later
    /// requests for disjoint GPUs.
    fn try_grants(&mut self, now: SimTime) {
        self.hold_queue.sort_unstable();
        let queue = std::mem::take(&mut self.hold_queue);
        for (since, rank) in queue {
            let RankState::WaitHold(req) = &self.states[rank] else {
                unreachable!("hold queue out of sync")
            };
            if req.gpus.iter().all(|&g| self.gpu_owner[g].is_none()) {
                let RankState::WaitHold(req) =
                    std::mem::replace(&mut self.states[rank], RankState::Idle)
                else {
                    unreachable!()
                };
                for &gpu in &req.gpus {
                    self.gpu_owner[gpu] = Some(rank);
                }
                let until = now + req.duration;
                self.emit(rank, now, EventKind::HoldAcquired, req.gpus.clone(), req.tag);
                self.emit(rank, now, EventKind::ComputeStart, req.gpus.clone(), req.tag);
                self.states[rank] = RankState::Computing {
                    until,
                    gpus: req.gpus,
                    tag: req.tag,
                };
                self.wakes.push(Reverse((until, rank)));
            } else {
                self.hold_queue.push((since, rank));
            }
        }
    }

    fn blocked_report(&self) -> Vec<BlockedInfo> {
        let mut blocked = Vec::new();
        for (rank, state) in self.states.iter().enumerate() {
            let cause = match state {
                RankState::Finished => continue,
                RankState::WaitRecv { src, .. } => WaitCause::Message { from: *src },
                RankState::WaitHold(req) => WaitCause::Gpus {
                    gpus: req.gpus.clone(),
                    held_by: req
                        .gpus
                        .iter()
                        .filter_map(|&g| self.gpu_owner[g].map(|o| (g, o)))
                        .collect(),
                },
                other => unreachable!(
                    "rank {rank} stalled in a state with a pending wake: {other:?}"
                ),
            };
            blocked.push(BlockedInfo { rank, cause });
        }
        blocked
    }
}

#[cfg(test)]
mod tests {
    use super::trace::resource_busy_intervals;
    use super::*;
    use crate::workload::{CostModel, SchedulerKind};

    fn config(num_ranks: usize, num_gpus: usize, msg_latency: f64) -> ClusterConfig {
        ClusterConfig {
            num_ranks,
            num_gpus,
            batch_size: 10_000,
            subbatches_per_batch: 1,
            scheduler: SchedulerKind::One2All,
            seed: 0,
            cost: CostModel {
                msg_latency,
                ..CostModel::default()
            },
        }
    }

    fn secs(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    fn run(
        scripts: Vec<Vec<Action>>,
        config: &ClusterConfig,
    ) -> Result<RunOutput<ScriptProgram>, SimError> {
        let programs = scripts
            .into_iter()
            .enumerate()
            .map(|(rank, actions)| ScriptProgram::new(rank, actions))
            .collect();
        run_programs(programs, config, &Workload::default())
    }

    #[test]
    fn message_arrives_after_latency() {
        let config = config(2, 1, 0.5);
        let out = run(
            vec![
                vec![
                    Action::Send {
                        dst: 1,
                        payload: Payload::Token,
                        tag: None,
                    },
                    Action::Finish,
                ],
                vec![Action::Recv { src: 0 }, Action::Finish],
            ],
            &config,
        )
        .unwrap();
        let recv = out
            .trace
            .events
            .iter()
            .find(|e| e.kind == EventKind::RecvCompleted)
            .unwrap();
        assert_eq!((recv.rank, recv.time), (1, secs(0.5)));
        assert_eq!(out.messages.len(), 1);
        assert_eq!(out.messages[0].deliver_time, secs(0.5));
    }

    #[test]
    fn mutual_recv_deadlocks_naming_both_ranks() {
        let config = config(2, 1, 0.5);
        let err = run(
            vec![
                vec![Action::Recv { src: 1 }, Action::Finish],
                vec![Action::Recv { src: 0 }, Action::Finish],
            ],
            &config,
        )
        .unwrap_err();
        let text = err.to_string();
        assert!(text.contains("deadlock"), "got: {text}");
        assert!(text.contains("rank 0") && text.contains("rank 1"), "got: {text}");
        let SimError::Deadlock { blocked } = err;
        assert_eq!(blocked.len(), 2);
        assert_eq!(blocked[0].cause, WaitCause::Message { from: 1 });
        assert_eq!(blocked[1].cause, WaitCause::Message { from: 0 });
    }

    #[test]
    fn equal_time_holds_grant_lowest_rank_first() {
        let config = config(2, 1, 0.0);
        let hold = |_r: usize| Action::HoldAndCompute {
            gpus: vec![0],
            duration: secs(1.0),
            tag: None,
        };
        let out = run(
            vec![vec![hold(0), Action::Finish], vec![hold(1), Action::Finish]],
            &config,
        )
        .unwrap();
        let busy = resource_busy_intervals(&out.trace).unwrap();
        assert_eq!(
            busy[&0],
            vec![(secs(0.0), secs(1.0)), (secs(1.0), secs(2.0))]
        );
        let starts: Vec<(usize, SimTime)> = out
            .trace
            .events
            .iter()
            .filter(|e| e.kind == EventKind::ComputeStart)
            .map(|e| (e.rank, e.time))
            .collect();
        assert_eq!(starts, vec![(0, secs(0.0)), (1, secs(1.0))]);
    }

    #[test]
    fn channel_is_fifo_per_pair() {
        let config = config(2, 1, 0.25);
        let out = run(
            vec![
                vec![
                    Action::Send {
                        dst: 1,
                        payload: Payload::BatchCount(1),
                        tag: None,
                    },
                    Action::Send {
                        dst: 1,
                        payload: Payload::BatchCount(2),
                        tag: None,
                    },
                    Action::Finish,
                ],
                vec![
                    Action::Recv { src: 0 },
                    Action::Recv { src: 0 },
                    Action::Finish,
                ],
            ],
            &config,
        )
        .unwrap();
        assert_eq!(
            out.programs[1].received,
            vec![Payload::BatchCount(1), Payload::BatchCount(2)]
        );
    }

    #[test]
    fn multi_gpu_hold_is_atomic_and_busy_sets_do_not_block_free_ones() {
        // r0 takes {0,1} at t=0; r1 wants {0} and must wait for the release;
        // r2 asks for {2} at t=0.5 and passes r1 because its GPU is free.
        let config = config(3, 3, 0.0);
        let out = run(
            vec![
                vec![
                    Action::HoldAndCompute {
                        gpus: vec![0, 1],
                        duration: secs(1.0),
                        tag: None,
                    },
                    Action::Finish,
                ],
                vec![
                    Action::HoldAndCompute {
                        gpus: vec![0],
                        duration: secs(1.0),
                        tag: None,
                    },
                    Action::Finish,
                ],
                vec![
                    Action::LocalWork { duration: secs(0.5) },
                    Action::HoldAndCompute {
                        gpus: vec![2],
                        duration: secs(1.0),
                        tag: None,
                    },
                    Action::Finish,
                ],
            ],
            &config,
        )
        .unwrap();
        let busy = resource_busy_intervals(&out.trace).unwrap();
        assert_eq!(busy[&0], vec![(secs(0.0), secs(1.0)), (secs(1.0), secs(2.0))]);
        assert_eq!(busy[&1], vec![(secs(0.0), secs(1.0))]);
        assert_eq!(busy[&2], vec![(secs(0.5), secs(1.5))]);
    }

    #[test]
    fn recv_posted_after_delivery_completes_at_post_time() {
        let config = config(2, 1, 0.1);
        let out = run(
            vec![
                vec![
                    Action::Send {
                        dst: 1,
                        payload: Payload::Token,
                        tag: None,
                    },
                    Action::Finish,
                ],
                vec![
                    Action::LocalWork { duration: secs(3.0) },
                    Action::Recv { src: 0 },
                    Action::Finish,
                ],
            ],
            &config,
        )
        .unwrap();
        let recv = out
            .trace
            .events
            .iter()
            .find(|e| e.kind == EventKind::RecvCompleted)
            .unwrap();
        assert_eq!(recv.time, secs(3.0));
    }

    #[test]
    fn trace_is_sorted_and_ends_with_all_ranks_finished() {
        let config = config(3, 3, 0.0);
        let out = run(
            vec![
                vec![
                    Action::HoldAndCompute {
                        gpus: vec![0],
                        duration: secs(0.5),
                        tag: None,
                    },
                    Action::Finish,
                ],
                vec![Action::LocalWork { duration: secs(0.2) }, Action::Finish],
                vec![Action::Finish],
            ],
            &config,
        )
        .unwrap();
        let keys: Vec<_> = out
            .trace
            .events
            .iter()
            .map(|e| (e.time, e.rank, e.seq))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let finishes = out
            .trace
            .events
            .iter()
            .filter(|e| e.kind == EventKind::RankFinished)
            .count();
        assert_eq!(finishes, 3);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let config = config(3, 2, 0.125);
        let mk = || {
            vec![
                vec![
                    Action::HoldAndCompute {
                        gpus: vec![0, 1],
                        duration: secs(0.75),
                        tag: None,
                    },
                    Action::Send {
                        dst: 1,
                        payload: Payload::Token,
                        tag: None,
                    },
                    Action::Finish,
                ],
                vec![
                    Action::Recv { src: 0 },
                    Action::HoldAndCompute {
                        gpus: vec![1],
                        duration: secs(0.25),
                        tag: None,
                    },
                    Action::Finish,
                ],
                vec![
                    Action::HoldAndCompute {
                        gpus: vec![0],
                        duration: secs(1.0),
                        tag: None,
                    },
                    Action::Finish,
                ],
            ]
        };
        let a = run(mk(), &config).unwrap().trace.to_tsv();
        let b = run(mk(), &config).unwrap().trace.to_tsv();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }
}
