//! Discrete-event multi-GPU simulator for fine-grained overlap of tiled
//! matrix-multiply compute with ring collective communication.
//!
//! The simulator models, at desk scale, a node of GPUs connected by a ring
//! (or fully-connected) interconnect. Each device has an LLC, multi-channel
//! DRAM with per-channel queues and near-memory op-and-store support, a
//! track-and-trigger table that detects completion of wavefront output tiles,
//! and pre-programmed DMA command tables driven by output address-space
//! configuration. Five execution modes are supported:
//!
//! * `sequential` — sliced GEMM, then a kernel-executed reduce-scatter, then
//!   an all-gather, strictly one after another.
//! * `fused` — the GEMM's output address space is configured so stores feed
//!   the reduce-scatter directly (remote stores for the first chunk,
//!   tracker-triggered DMA updates for the steady-state chunks, near-memory
//!   reductions throughout), followed by a sequential all-gather.
//! * `fused-mca` — `fused` plus a communication-aware memory-controller
//!   arbitration policy.
//! * `ideal-overlap` — max(GEMM, RS) + AG built from isolated-kernel runs.
//! * `ideal-overlap-nmc` — max(GEMM, RS-with-NMC) + AG.
//!
//! Simulated time is integer nanoseconds; a single run is strictly
//! single-threaded and deterministic.

pub mod cli;
pub mod collectives;
pub mod config;
pub mod dma;
pub mod engine;
pub mod gemm;
pub mod mca;
pub mod memory;
pub mod report;
pub mod scalar;
pub mod sim;
pub mod topology;
pub mod tracker;
pub mod workloads;

pub use config::{ConfigError, SimConfig};
pub use engine::RunMode;
pub use report::SimReport;
pub use scalar::Scalar;
pub use sim::Simulator;

/// Default payload scalar for functional runs: exact integer arithmetic so
/// reduction results can be compared against oracles with zero tolerance.
pub type IntPayload = i64;

/// Simulator instantiated with the default exact integer payload.
pub type IntSimulator = Simulator<IntPayload>;

/// Simulator carrying f64 payloads, for experiments where exactness is not
/// required.
pub type FloatSimulator = Simulator<f64>;

/// Convenience: run one mode with the default integer payload type.
pub fn run(mode: RunMode, cfg: &SimConfig) -> Result<SimReport, sim::SimError> {
    sim::run_mode::<IntPayload>(mode, cfg)
}
