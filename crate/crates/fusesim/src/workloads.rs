//! Built-in Transformer model definitions, tensor-sliced sub-layer GEMM
//! shapes, and the end-to-end speedup scaler.
//!
//! Sub-layer shapes follow standard tensor-parallel row-slicing of the second
//! GEMM in each pair: the output keeps M = SL*B rows and N = H columns while
//! the dot-product dimension is sliced, so K = H/t for the attention output
//! projection, 4H/t for FC-2 (forward) and FC-1 (backprop), and 3H/t for the
//! fused QKV input projection in backprop.

use crate::config::ConfigError;
use crate::gemm::GemmShape;

/// A named model: hidden size, layer count, tokens = SL * B.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ModelDesc {
    pub name: &'static str,
    pub hidden: usize,
    pub layers: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub tp_degrees: &'static [usize],
}

impl ModelDesc {
    pub fn tokens(&self) -> usize {
        self.seq_len * self.batch
    }
}

pub const MODELS: &[ModelDesc] = &[
    ModelDesc { name: "mega-gpt-2", hidden: 3072, layers: 74, seq_len: 1024, batch: 16, tp_degrees: &[8, 16] },
    ModelDesc { name: "t-nlg", hidden: 4256, layers: 78, seq_len: 1024, batch: 8, tp_degrees: &[8, 16] },
    ModelDesc { name: "gpt-3", hidden: 12288, layers: 96, seq_len: 1024, batch: 2, tp_degrees: &[32] },
    ModelDesc { name: "palm", hidden: 18432, layers: 118, seq_len: 1024, batch: 2, tp_degrees: &[32] },
    ModelDesc { name: "mt-nlg", hidden: 20480, layers: 105, seq_len: 1024, batch: 2, tp_degrees: &[32] },
];

/// The two small models used for the trend sweeps.
pub const SMALL_MODELS: &[&str] = &["mega-gpt-2", "t-nlg"];

pub fn model_by_name(name: &str) -> Option<&'static ModelDesc> {
    let wanted = name.trim().to_lowercase().replace('_', "-");
    MODELS.iter().find(|m| m.name == wanted)
}

/// Sliced sub-layers whose partial outputs require an all-reduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sublayer {
    /// Attention output projection, forward pass.
    Op,
    /// Fully-connected 2, forward pass.
    Fc2,
    /// Fully-connected 1, backprop (data gradient).
    Fc1Bwd,
    /// Input (QKV) projection, backprop.
    IpBwd,
}

impl Sublayer {
    pub const ALL: [Sublayer; 4] = [Sublayer::Op, Sublayer::Fc2, Sublayer::Fc1Bwd, Sublayer::IpBwd];

    pub fn as_str(&self) -> &'static str {
        match self {
            Sublayer::Op => "op",
            Sublayer::Fc2 => "fc2",
            Sublayer::Fc1Bwd => "fc1-bwd",
            Sublayer::IpBwd => "ip-bwd",
        }
    }

    pub fn parse(s: &str) -> Option<Sublayer> {
        match s.trim().to_lowercase().replace('_', "-").as_str() {
            "op" => Some(Sublayer::Op),
            "fc2" | "fc-2" => Some(Sublayer::Fc2),
            "fc1-bwd" | "fc-1-bwd" | "fc1" => Some(Sublayer::Fc1Bwd),
            "ip-bwd" | "ip" => Some(Sublayer::IpBwd),
            _ => None,
        }
    }

    /// Unsliced K as a multiple of the hidden size.
    fn k_times_hidden(&self) -> usize {
        match self {
            Sublayer::Op => 1,
            Sublayer::Fc2 | Sublayer::Fc1Bwd => 4,
            Sublayer::IpBwd => 3,
        }
    }
}

/// One sliced GEMM -> all-reduce case.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SublayerCase {
    pub model: String,
    pub tp: usize,
    pub sublayer: Sublayer,
    pub shape: GemmShape,
    /// Bytes the following collective moves: the full partial output.
    pub collective_bytes: u64,
    /// True when tp did not divide K and the slice was padded up.
    pub padded: bool,
}

/// Derive the four sliced sub-layer shapes for `model` at slicing degree `tp`.
pub fn sublayer_shapes(
    model: &ModelDesc,
    tp: usize,
    element_bytes: usize,
) -> Result<Vec<SublayerCase>, ConfigError> {
    if tp < 2 {
        return Err(ConfigError::invalid(
            "workload.tp",
            "tp = 1 leaves K unsliced and needs no collective",
        ));
    }
    let mut out = Vec::new();
    for sub in Sublayer::ALL {
        let k_full = sub.k_times_hidden() * model.hidden;
        let padded = !k_full.is_multiple_of(tp);
        let k = k_full.div_ceil(tp);
        let shape = GemmShape::new(model.tokens(), model.hidden, k, element_bytes);
        out.push(SublayerCase {
            model: model.name.to_string(),
            tp,
            sublayer: sub,
            collective_bytes: shape.output_bytes(),
            shape,
            padded,
        });
    }
    Ok(out)
}

pub fn sublayer_case(
    model_name: &str,
    tp: usize,
    sub: Sublayer,
    element_bytes: usize,
) -> Result<SublayerCase, ConfigError> {
    let model = model_by_name(model_name)
        .ok_or_else(|| ConfigError::invalid("workload.model", format!("unknown model `{model_name}`")))?;
    let cases = sublayer_shapes(model, tp, element_bytes)?;
    Ok(cases.into_iter().find(|c| c.sublayer == sub).expect("all sublayers derived"))
}

/// Sub-layer case for a user-supplied model given directly by its
/// hyperparameters (hidden size, sequence length, batch).
pub fn custom_sublayer_case(
    hidden: usize,
    seq_len: usize,
    batch: usize,
    tp: usize,
    sub: Sublayer,
    element_bytes: usize,
) -> Result<SublayerCase, ConfigError> {
    if hidden == 0 || seq_len == 0 || batch == 0 {
        return Err(ConfigError::invalid("workload", "custom models need hidden, seq_len, batch"));
    }
    if tp < 2 {
        return Err(ConfigError::invalid("workload.tp", "tp = 1 needs no collective"));
    }
    let k_full = sub.k_times_hidden() * hidden;
    let k = k_full.div_ceil(tp);
    let shape = GemmShape::new(seq_len * batch, hidden, k, element_bytes);
    Ok(SublayerCase {
        model: format!("custom-h{hidden}"),
        tp,
        sublayer: sub,
        collective_bytes: shape.output_bytes(),
        shape,
        padded: k_full % tp != 0,
    })
}

/// Baseline end-to-end runtime split into the buckets the sliced sub-layers
/// touch. Fractions must sum to 1 (within 1e-6).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaselineBreakdown {
    pub sliced_gemm: f64,
    pub rs: f64,
    pub ag: f64,
    pub other: f64,
}

impl BaselineBreakdown {
    pub fn sum(&self) -> f64 {
        self.sliced_gemm + self.rs + self.ag + self.other
    }

    pub fn comm_fraction(&self) -> f64 {
        self.rs + self.ag
    }
}

/// Per-bucket speedups to apply to a baseline breakdown. The fused modes
/// accelerate the sliced-GEMM and RS buckets jointly; AG is unchanged.
#[derive(Debug, Clone, Copy)]
pub struct BucketSpeedups {
    pub sliced_gemm: f64,
    pub rs: f64,
    pub ag: f64,
    pub other: f64,
}

impl BucketSpeedups {
    pub fn uniform(x: f64) -> BucketSpeedups {
        BucketSpeedups { sliced_gemm: x, rs: x, ag: x, other: 1.0 }
    }
}

/// Scale each bucket of the baseline breakdown by its speedup; returns the
/// end-to-end speedup 1 / new_time.
pub fn end_to_end_speedup(
    baseline: &BaselineBreakdown,
    speedups: &BucketSpeedups,
) -> Result<f64, ConfigError> {
    if (baseline.sum() - 1.0).abs() > 1e-6 {
        return Err(ConfigError::invalid(
            "breakdown",
            format!("fractions sum to {}, expected 1", baseline.sum()),
        ));
    }
    for (name, s) in [
        ("sliced_gemm", speedups.sliced_gemm),
        ("rs", speedups.rs),
        ("ag", speedups.ag),
        ("other", speedups.other),
    ] {
        if s <= 0.0 {
            return Err(ConfigError::invalid("speedups", format!("{name} speedup must be > 0")));
        }
    }
    let new_time = baseline.sliced_gemm / speedups.sliced_gemm
        + baseline.rs / speedups.rs
        + baseline.ag / speedups.ag
        + baseline.other / speedups.other;
    Ok(1.0 / new_time)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Training,
    Inference,
}

/// Approximate baseline breakdowns per (model, tp, phase), read off the
/// reported chart proportions; the headline numbers they reproduce are the
/// up-to-34% (Mega-GPT-2) and up-to-43% (T-NLG) communication fractions.
/// These are config-style inputs, not measurements from this simulator.
pub fn default_breakdown(model: &str, tp: usize, phase: Phase) -> Option<BaselineBreakdown> {
    let b = match (model, tp, phase) {
        ("mega-gpt-2", 8, Phase::Training) => BaselineBreakdown { sliced_gemm: 0.15, rs: 0.12, ag: 0.10, other: 0.63 },
        ("mega-gpt-2", 16, Phase::Training) => BaselineBreakdown { sliced_gemm: 0.12, rs: 0.18, ag: 0.16, other: 0.54 },
        ("mega-gpt-2", 8, Phase::Inference) => BaselineBreakdown { sliced_gemm: 0.17, rs: 0.14, ag: 0.12, other: 0.57 },
        ("mega-gpt-2", 16, Phase::Inference) => BaselineBreakdown { sliced_gemm: 0.14, rs: 0.20, ag: 0.18, other: 0.48 },
        ("t-nlg", 8, Phase::Training) => BaselineBreakdown { sliced_gemm: 0.16, rs: 0.14, ag: 0.12, other: 0.58 },
        ("t-nlg", 16, Phase::Training) => BaselineBreakdown { sliced_gemm: 0.14, rs: 0.19, ag: 0.17, other: 0.50 },
        ("t-nlg", 8, Phase::Inference) => BaselineBreakdown { sliced_gemm: 0.18, rs: 0.16, ag: 0.14, other: 0.52 },
        ("t-nlg", 16, Phase::Inference) => BaselineBreakdown { sliced_gemm: 0.15, rs: 0.23, ag: 0.20, other: 0.42 },
        _ => return None,
    };
    debug_assert!((b.sum() - 1.0).abs() < 1e-9);
    Some(b)
}
