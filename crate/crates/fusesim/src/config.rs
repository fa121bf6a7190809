//! Run configuration: loading, defaults, and validation.
//!
//! An empty config file resolves to the default system (8 GPUs on a 150 GB/s
//! per-direction ring with 500 ns link latency; 80 CUs at 1.4 GHz per GPU;
//! 16 MB LLC; 1 TB/s HBM over 32 channels with CCDL=2 / CCDWL=4 at 1 GHz).
//! Unknown keys are rejected. Validation returns a field path with each
//! error and a list of non-fatal warnings.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::engine::RunMode;
use crate::topology::TopologyKind;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config at `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    pub fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid { field: field.to_string(), message: message.into() }
    }
}

/// System-level hardware parameters (per device unless noted).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub n_gpus: usize,
    pub n_cus: usize,
    pub cu_freq_ghz: f64,
    pub threads_per_cu: usize,
    /// FP16 FMA throughput per CU per cycle (matrix-core class).
    pub flops_per_cu_per_cycle: f64,
    pub llc_mb: usize,
    pub llc_line_bytes: usize,
    pub llc_ways: usize,
    /// Aggregate DRAM bandwidth per device, GB/s.
    pub hbm_bw_gbps: f64,
    pub n_channels: usize,
    pub ccdl_cycles: u64,
    pub ccdwl_cycles: u64,
    pub dram_freq_ghz: f64,
    /// Post-arbitration DRAM queue depth per channel.
    pub channel_queue_depth: usize,
    /// Per-direction link bandwidth, GB/s.
    pub link_bandwidth_gbps: f64,
    pub link_latency_ns: u64,
    pub topology: TopologyKind,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            n_gpus: 8,
            n_cus: 80,
            cu_freq_ghz: 1.4,
            threads_per_cu: 2048,
            flops_per_cu_per_cycle: 1024.0,
            llc_mb: 16,
            llc_line_bytes: 256,
            llc_ways: 8,
            hbm_bw_gbps: 1000.0,
            n_channels: 32,
            ccdl_cycles: 2,
            ccdwl_cycles: 4,
            dram_freq_ghz: 1.0,
            channel_queue_depth: 64,
            link_bandwidth_gbps: 150.0,
            link_latency_ns: 500,
            topology: TopologyKind::Ring,
        }
    }
}

impl SystemConfig {
    /// Bytes/ns of one DRAM channel.
    pub fn channel_bw(&self) -> f64 {
        self.hbm_bw_gbps / self.n_channels as f64
    }

    pub fn ccdl_ns(&self) -> f64 {
        self.ccdl_cycles as f64 / self.dram_freq_ghz
    }

    pub fn ccdwl_ns(&self) -> f64 {
        self.ccdwl_cycles as f64 / self.dram_freq_ghz
    }

    /// FLOP/ns of the whole device.
    pub fn flops_per_ns(&self) -> f64 {
        self.n_cus as f64 * self.flops_per_cu_per_cycle * self.cu_freq_ghz
    }
}

/// Workload selection: a named model sub-layer or an explicit GEMM shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// Built-in model name (e.g. "mega-gpt-2", "t-nlg"); empty for explicit
    /// shapes or user-supplied hyperparameters.
    pub model: String,
    pub tp: usize,
    /// One of "op", "fc2", "fc1-bwd", "ip-bwd"; empty for explicit shapes.
    pub sublayer: String,
    /// User-supplied model hyperparameters (alternative to `model`).
    pub hidden: usize,
    pub seq_len: usize,
    pub batch: usize,
    /// Explicit GEMM shape (alternative to both of the above).
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub element_bytes: usize,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            model: String::new(),
            tp: 8,
            sublayer: String::new(),
            hidden: 0,
            seq_len: 0,
            batch: 0,
            m: 0,
            n: 0,
            k: 0,
            element_bytes: 2,
        }
    }
}

impl WorkloadConfig {
    pub fn is_custom_model(&self) -> bool {
        self.model.is_empty() && self.hidden > 0
    }

    pub fn is_explicit(&self) -> bool {
        self.model.is_empty() && !self.is_custom_model()
    }
}

/// GEMM tiling geometry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TileConfig {
    pub wg_tile_m: usize,
    pub wg_tile_n: usize,
    pub wfs_per_wg: usize,
    pub wf_tile_m: usize,
    pub wf_tile_n: usize,
    pub threads_per_wf: usize,
    pub wgs_per_cu: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        // 128x128 WG tiles of 8 WFs (64x32 each), 64 threads/WF -> 512
        // threads/WG -> 4 WGs co-resident per 2K-thread CU.
        TileConfig {
            wg_tile_m: 128,
            wg_tile_n: 128,
            wfs_per_wg: 8,
            wf_tile_m: 64,
            wf_tile_n: 32,
            threads_per_wf: 64,
            wgs_per_cu: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    RingRs,
    RingAg,
    RingAr,
    DirectRs,
}

impl CollectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CollectiveKind::RingRs => "ring_rs",
            CollectiveKind::RingAg => "ring_ag",
            CollectiveKind::RingAr => "ring_ar",
            CollectiveKind::DirectRs => "direct_rs",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CollectiveConfig {
    pub kind: CollectiveKind,
    /// Kernel-executed RS accounting: when true (default) the last arrival is
    /// folded with the local copy in a final reduction pass (reads
    /// (2N-1)·S/N, writes N·S/N per device); when false every step uniformly
    /// costs 2 reads + 1 write per element share (reads 2(N-1)·S/N).
    pub final_step_fold: bool,
}

impl Default for CollectiveConfig {
    fn default() -> Self {
        CollectiveConfig { kind: CollectiveKind::RingAr, final_step_fold: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub sets: usize,
    pub ways: usize,
    /// Override for updates expected per element; 0 derives it from the
    /// collective program (2 for ring-RS, 1 for stores).
    pub expected_updates_per_element: u32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        // A producer that runs ahead of the ring keeps several chunks' WF
        // entries live at once; observed peaks on the built-in workloads are
        // ~64 ways with 256 sets. Overflow is fatal, so default with headroom.
        TrackerConfig { sets: 256, ways: 128, expected_updates_per_element: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArbiterKind {
    RoundRobin,
    Mca,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct McaConfig {
    /// Candidate occupancy thresholds, smallest first; "no limit" is implied.
    pub thresholds: Vec<usize>,
    pub starvation_limit_cycles: u64,
    /// Arbiter actually used is picked by the run mode; this seeds
    /// non-standard experiments and channel-level tests.
    pub arbiter: ArbiterKind,
}

impl Default for McaConfig {
    fn default() -> Self {
        McaConfig {
            thresholds: vec![5, 10, 30],
            starvation_limit_cycles: 1000,
            arbiter: ArbiterKind::RoundRobin,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub mode: RunMode,
    pub seed: u64,
    /// Carry numeric payloads through memory and links (small scales only).
    pub functional: bool,
    /// Contiguous same-kind spans batch into single transactions up to this
    /// many bytes.
    pub batch_bytes: usize,
    /// Emit one transaction per (WG, WF, map-range) output region instead of
    /// per contiguous column run. Byte counters are exact either way.
    pub coalesce_output_tiles: bool,
    pub trace: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            mode: RunMode::Sequential,
            seed: 0,
            functional: false,
            batch_bytes: 4096,
            coalesce_output_tiles: true,
            trace: false,
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub system: SystemConfig,
    pub workload: WorkloadConfig,
    pub tiles: TileConfig,
    pub collective: CollectiveConfig,
    pub tracker: TrackerConfig,
    pub mca: McaConfig,
    pub sim: SimSection,
}

impl SimConfig {
    /// Parse a TOML string; defaults fill anything unspecified.
    pub fn from_toml(text: &str) -> Result<SimConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(SimConfig, Vec<String>), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_toml(&text)?;
        let warnings = cfg.validate()?;
        Ok((cfg, warnings))
    }

    /// Validate, returning non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let mut warnings = Vec::new();
        let s = &self.system;
        if s.n_gpus < 2 {
            return Err(ConfigError::invalid("system.n_gpus", "ring collectives need >= 2 devices"));
        }
        if s.n_cus == 0 {
            return Err(ConfigError::invalid("system.n_cus", "need at least one CU"));
        }
        if s.n_channels == 0 || s.hbm_bw_gbps <= 0.0 {
            return Err(ConfigError::invalid("system.hbm_bw_gbps", "DRAM bandwidth must be positive"));
        }
        if s.link_bandwidth_gbps <= 0.0 {
            return Err(ConfigError::invalid("system.link_bandwidth_gbps", "must be positive"));
        }
        if s.channel_queue_depth == 0 {
            return Err(ConfigError::invalid("system.channel_queue_depth", "must be positive"));
        }
        if s.ccdwl_cycles != 2 * s.ccdl_cycles {
            warnings.push(format!(
                "system.ccdwl_cycles = {} is not 2x ccdl_cycles = {}; accepted, but the \
                 near-memory op-and-store model assumes CCDWL = 2*CCDL",
                s.ccdwl_cycles, s.ccdl_cycles
            ));
        }

        let t = &self.tiles;
        if t.wfs_per_wg == 0 || t.wfs_per_wg > 8 {
            return Err(ConfigError::invalid(
                "tiles.wfs_per_wg",
                "must be in 1..=8 (3-bit WF id)",
            ));
        }
        if t.wg_tile_m * t.wg_tile_n != t.wfs_per_wg * t.wf_tile_m * t.wf_tile_n {
            return Err(ConfigError::invalid(
                "tiles",
                "WG tile area must equal the sum of its WF tile areas",
            ));
        }
        if !t.wg_tile_m.is_multiple_of(t.wf_tile_m) || !t.wg_tile_n.is_multiple_of(t.wf_tile_n) {
            return Err(ConfigError::invalid("tiles", "WF tiles must tile the WG tile"));
        }
        if t.wgs_per_cu == 0 {
            return Err(ConfigError::invalid("tiles.wgs_per_cu", "must be positive"));
        }
        let threads_per_wg = t.wfs_per_wg * t.threads_per_wf;
        if threads_per_wg * t.wgs_per_cu > s.threads_per_cu {
            warnings.push(format!(
                "tiles: {} WGs/CU x {} threads/WG exceeds {} threads/CU",
                t.wgs_per_cu, threads_per_wg, s.threads_per_cu
            ));
        }

        let w = &self.workload;
        if w.is_explicit() {
            if w.m == 0 || w.n == 0 || w.k == 0 {
                return Err(ConfigError::invalid(
                    "workload",
                    "explicit shapes need positive m, n, k (or set workload.model / hidden)",
                ));
            }
        } else if w.is_custom_model() {
            if w.seq_len == 0 || w.batch == 0 {
                return Err(ConfigError::invalid(
                    "workload",
                    "custom models need hidden, seq_len, and batch",
                ));
            }
        } else if crate::workloads::model_by_name(&w.model).is_none() {
            return Err(ConfigError::invalid(
                "workload.model",
                format!("unknown model `{}`", w.model),
            ));
        }
        if w.element_bytes == 0 {
            return Err(ConfigError::invalid("workload.element_bytes", "must be positive"));
        }
        if !w.is_explicit() && w.tp != s.n_gpus {
            warnings.push(format!(
                "workload.tp = {} but system.n_gpus = {}: the collective ring spans n_gpus                  devices while K is sliced by tp",
                w.tp, s.n_gpus
            ));
        }

        if self.collective.kind == CollectiveKind::DirectRs
            && s.topology != TopologyKind::FullyConnected
        {
            return Err(ConfigError::invalid(
                "collective.kind",
                "direct_rs requires topology = \"fully_connected\"",
            ));
        }

        if self.tracker.sets == 0 || !self.tracker.sets.is_power_of_two() {
            return Err(ConfigError::invalid("tracker.sets", "must be a power of two"));
        }

        let mut th = self.mca.thresholds.clone();
        th.sort_unstable();
        if th.is_empty() {
            return Err(ConfigError::invalid("mca.thresholds", "need at least one threshold"));
        }
        if th.iter().any(|&x| x == 0 || x > s.channel_queue_depth) {
            return Err(ConfigError::invalid(
                "mca.thresholds",
                "thresholds must be in 1..=channel_queue_depth",
            ));
        }
        if self.sim.mode != RunMode::FusedMca && self.mca != McaConfig::default() {
            warnings.push(
                "mca parameters are set but sim.mode is not fused-mca; they are ignored"
                    .to_string(),
            );
        }

        Ok(warnings)
    }

    /// Stable hex digest of the resolved configuration plus mode, used to
    /// pair reports of the same workload.
    pub fn fingerprint(&self, mode: RunMode) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(self).expect("config serializes").as_bytes());
        hasher.update(mode.as_str().as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(12).map(|b| format!("{:02x}", b)).collect()
    }

    /// Fingerprint of the workload alone (mode-independent), used to check
    /// that speedup ratios compare like with like.
    pub fn workload_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(&self.system).unwrap().as_bytes());
        hasher.update(serde_json::to_string(&self.workload).unwrap().as_bytes());
        hasher.update(serde_json::to_string(&self.tiles).unwrap().as_bytes());
        hasher.update(serde_json::to_string(&self.collective).unwrap().as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(12).map(|b| format!("{:02x}", b)).collect()
    }
}
