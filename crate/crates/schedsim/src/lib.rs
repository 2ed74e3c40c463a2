//! Deterministic virtual-time simulator for multi-process GPU scheduling
//! protocols used in pairwise sequence-alignment pipelines.
//!
//! Ranks are modelled as sequential programs that compute on GPUs, exchange
//! point-to-point messages, and hand the accelerators to each other in a
//! ring. The kernel in [`simkernel`] advances virtual time over those
//! programs and records a trace; [`schedulers`] builds the per-rank programs
//! for each protocol; [`verify`] checks trace invariants and derives summary
//! metrics; [`workload`] owns partitioning arithmetic and configuration.

pub mod cli;
pub mod schedulers;
pub mod simkernel;
pub mod time;
pub mod verify;
pub mod workload;

pub use time::SimTime;
