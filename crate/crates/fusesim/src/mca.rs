//! Memory-controller arbitration between the compute and communication
//! streams of one DRAM channel.
//!
//! The baseline arbiter round-robins between the streams and falls back to
//! the other when one is empty. The communication-aware policy always
//! prioritizes compute accesses; when the compute queue is empty it issues
//! communication accesses only while the DRAM queue occupancy is below a
//! threshold (keeping headroom for future compute arrivals), and it bounds
//! communication starvation by prioritizing the stream once its head has
//! waited past a limit. The threshold is calibrated from the peak occupancy
//! the kernel's own traffic reaches during its first (isolated) stage and
//! stays fixed until the next kernel. The communication stream is drained at
//! producer-kernel boundaries.

use crate::config::{ArbiterKind, McaConfig};
use crate::engine::Ns;

/// Occupancy limit; `None` is "no limit".
pub type Threshold = Option<usize>;

/// Arbitration decision for one issue slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pick {
    Compute,
    Comm,
    Stall,
}

/// Per-channel arbiter state.
#[derive(Debug, Clone)]
pub struct ArbiterState {
    pub kind: ArbiterKind,
    pub threshold: Threshold,
    pub starvation_limit_ns: Ns,
    /// Arrival time of the current communication-queue head.
    pub comm_head_since: Option<Ns>,
    /// Round-robin: stream issued last.
    last_was_comm: bool,
    /// Occupancy -> threshold mapping is frozen once calibrated, until the
    /// next kernel boundary.
    pub calibrated: bool,
    /// Peak compute-stream occupancy observed while calibrating.
    pub peak_compute_occupancy: usize,
    /// Kernel boundary reached: communication drains regardless of threshold.
    pub draining: bool,
    /// Policy-conformance check: times a starved comm head was passed over.
    pub starvation_violations: u64,
}

impl ArbiterState {
    pub fn new(kind: ArbiterKind, cfg: &McaConfig, dram_freq_ghz: f64) -> ArbiterState {
        ArbiterState {
            kind,
            threshold: None,
            starvation_limit_ns: (cfg.starvation_limit_cycles as f64 / dram_freq_ghz).ceil() as Ns,
            comm_head_since: None,
            last_was_comm: false,
            calibrated: false,
            peak_compute_occupancy: 0,
            draining: false,
            starvation_violations: 0,
        }
    }

    fn comm_starved(&self, now: Ns) -> bool {
        match self.comm_head_since {
            Some(since) => now.saturating_sub(since) > self.starvation_limit_ns,
            None => false,
        }
    }

    /// Pick a stream for the next issue slot. `comm_occupancy` counts the
    /// DRAM-queue slots communication currently holds; the threshold bounds
    /// it so the queue always keeps room for future compute accesses.
    pub fn select(
        &mut self,
        now: Ns,
        compute_nonempty: bool,
        comm_nonempty: bool,
        comm_occupancy: usize,
    ) -> Pick {
        let pick = match self.kind {
            ArbiterKind::RoundRobin => {
                if compute_nonempty && comm_nonempty {
                    if self.last_was_comm {
                        Pick::Compute
                    } else {
                        Pick::Comm
                    }
                } else if compute_nonempty {
                    Pick::Compute
                } else if comm_nonempty {
                    Pick::Comm
                } else {
                    Pick::Stall
                }
            }
            ArbiterKind::Mca => {
                if comm_nonempty && self.comm_starved(now) {
                    Pick::Comm
                } else if compute_nonempty {
                    Pick::Compute
                } else if comm_nonempty {
                    let under = match self.threshold {
                        Some(t) => comm_occupancy < t,
                        None => true,
                    };
                    if under || self.draining {
                        Pick::Comm
                    } else {
                        Pick::Stall
                    }
                } else {
                    Pick::Stall
                }
            }
        };
        if comm_nonempty && self.comm_starved(now) && pick != Pick::Comm {
            self.starvation_violations += 1;
        }
        match pick {
            Pick::Comm => {
                self.last_was_comm = true;
                self.comm_head_since = None; // head consumed; channel re-arms
            }
            Pick::Compute => self.last_was_comm = false,
            Pick::Stall => {}
        }
        pick
    }

    /// Record calibration samples while the first stage runs.
    pub fn observe_compute_occupancy(&mut self, occ: usize) {
        if !self.calibrated {
            self.peak_compute_occupancy = self.peak_compute_occupancy.max(occ);
        }
    }

    /// Map the observed first-stage peak occupancy to an occupancy threshold:
    /// memory-intensive kernels (high peak) get small thresholds. Quartile
    /// rule over the queue depth; candidates smallest-first, "no limit" last.
    pub fn calibrate(&mut self, queue_depth: usize, candidates: &[usize]) -> Threshold {
        let mut sorted = candidates.to_vec();
        sorted.sort_unstable();
        let peak = self.peak_compute_occupancy as f64 / queue_depth as f64;
        let threshold = if peak >= 0.75 {
            sorted.first().copied()
        } else if peak >= 0.50 {
            sorted.get(1).or(sorted.first()).copied()
        } else if peak >= 0.25 {
            sorted.get(2).or(sorted.last()).copied()
        } else {
            None
        };
        self.threshold = threshold;
        self.calibrated = true;
        threshold
    }

    /// Producer-kernel boundary: pending communication flushes before the
    /// next kernel's first compute access; threshold re-calibrates next kernel.
    pub fn kernel_boundary(&mut self) {
        self.draining = true;
    }

    /// Next kernel begins: stop draining, re-arm calibration.
    pub fn kernel_start(&mut self) {
        self.draining = false;
        self.calibrated = false;
        self.peak_compute_occupancy = 0;
        self.threshold = None;
    }
}
