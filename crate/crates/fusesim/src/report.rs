//! Exact runtime and DRAM-traffic accounting, speedup computation, and
//! report assembly. Reports serialize to JSON (machine) and CSV rows
//! (spreadsheet/plot); field order is fixed so identical runs produce
//! byte-identical output.

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, SimConfig};
use crate::engine::RunMode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeBreakdown {
    pub gemm_ns: u64,
    pub rs_ns: u64,
    pub ag_ns: u64,
    /// Span of the fused GEMM-RS region (0 when nothing overlaps).
    pub overlap_ns: u64,
    pub total_ns: u64,
}

/// DRAM bytes by category; every access lands in exactly one bucket.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramBytes {
    pub gemm_read: u64,
    pub gemm_write: u64,
    pub rs_read: u64,
    pub rs_write: u64,
    pub ag_read: u64,
    pub ag_write: u64,
}

impl DramBytes {
    pub fn total(&self) -> u64 {
        self.gemm_read + self.gemm_write + self.rs_read + self.rs_write + self.ag_read + self.ag_write
    }

    pub fn add(&mut self, other: &DramBytes) {
        self.gemm_read += other.gemm_read;
        self.gemm_write += other.gemm_write;
        self.rs_read += other.rs_read;
        self.rs_write += other.rs_write;
        self.ag_read += other.ag_read;
        self.ag_write += other.ag_write;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkTraffic {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub messages: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub mode: RunMode,
    pub workload: String,
    pub fingerprint: String,
    pub workload_fingerprint: String,
    pub runtime: RuntimeBreakdown,
    pub dram: DramBytes,
    pub dram_total: u64,
    pub link_traffic: Vec<LinkTraffic>,
    /// Steady-state DMA command fires, summed over devices.
    pub trigger_count: u64,
    /// Bytes the GEMM emitted as output stores (local + remote), all devices.
    pub gemm_emitted_write_bytes: u64,
    /// Simulated time CUs spent running reduction kernels.
    pub cu_reduction_ns: u64,
    pub llc_hit_bytes: u64,
    pub llc_miss_bytes: u64,
    pub tracker_size_bytes: usize,
    pub tracker_peak_ways: usize,
    /// Arbiter policy-conformance: starved comm heads passed over.
    pub starvation_violations: u64,
    /// Mean queueing delay of compute-stream reads, ns.
    pub mean_compute_read_wait_ns: f64,
    /// Highest DRAM-queue occupancy seen on any channel.
    pub peak_channel_occupancy: usize,
    /// Full resolved configuration, for reproducibility.
    pub config: SimConfig,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<SimReport, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn csv_header() -> &'static str {
        "workload,mode,total_ns,gemm_ns,rs_ns,ag_ns,overlap_ns,dram_total_bytes,\
         gemm_read,gemm_write,rs_read,rs_write,ag_read,ag_write,trigger_count,cu_reduction_ns"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.workload,
            self.mode,
            self.runtime.total_ns,
            self.runtime.gemm_ns,
            self.runtime.rs_ns,
            self.runtime.ag_ns,
            self.runtime.overlap_ns,
            self.dram_total,
            self.dram.gemm_read,
            self.dram.gemm_write,
            self.dram.rs_read,
            self.dram.rs_write,
            self.dram.ag_read,
            self.dram.ag_write,
            self.trigger_count,
            self.cu_reduction_ns,
        )
    }
}

/// baseline.total / candidate.total; both reports must describe the same
/// workload.
pub fn speedup(baseline: &SimReport, candidate: &SimReport) -> Result<f64, ConfigError> {
    if baseline.workload_fingerprint != candidate.workload_fingerprint {
        return Err(ConfigError::invalid(
            "report",
            format!(
                "workload fingerprints differ: {} vs {}",
                baseline.workload_fingerprint, candidate.workload_fingerprint
            ),
        ));
    }
    Ok(baseline.runtime.total_ns as f64 / candidate.runtime.total_ns as f64)
}

/// exp(mean(log(r))) over strictly positive ratios.
pub fn geomean(ratios: &[f64]) -> Result<f64, ConfigError> {
    if ratios.is_empty() {
        return Err(ConfigError::invalid("geomean", "empty ratio list"));
    }
    if let Some(bad) = ratios.iter().find(|&&r| r <= 0.0) {
        return Err(ConfigError::invalid("geomean", format!("non-positive ratio {bad}")));
    }
    let mean_log = ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64;
    Ok(mean_log.exp())
}

/// 1 - candidate_bytes / baseline_bytes, as a fraction.
pub fn traffic_reduction(baseline: &SimReport, candidate: &SimReport) -> Result<f64, ConfigError> {
    if baseline.workload_fingerprint != candidate.workload_fingerprint {
        return Err(ConfigError::invalid("report", "workload fingerprints differ"));
    }
    if baseline.dram_total == 0 {
        return Err(ConfigError::invalid("report", "zero baseline DRAM bytes"));
    }
    Ok(1.0 - candidate.dram_total as f64 / baseline.dram_total as f64)
}
