//! Collective schedules and functional oracles.
//!
//! Ring collectives chunk the array N ways and move data toward the
//! predecessor for N-1 steps. The kernel-executed reduce-scatter comes in
//! three timing/accounting variants; all three leave device d owning the
//! fully reduced chunk (d-1) mod N, which is also where the fused
//! (store-triggered) path lands, so functional results are directly
//! comparable across every mode.

use crate::config::CollectiveKind;
use crate::scalar::Scalar;

/// A collective instance over one array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectiveDesc {
    pub kind: CollectiveKind,
    pub array_bytes: u64,
    pub n_devices: usize,
    pub fused: bool,
}

impl CollectiveDesc {
    pub fn steps(&self) -> usize {
        match self.kind {
            CollectiveKind::RingRs | CollectiveKind::RingAg => self.n_devices - 1,
            CollectiveKind::RingAr => 2 * (self.n_devices - 1),
            CollectiveKind::DirectRs => 1,
        }
    }

    pub fn chunk_bytes(&self) -> u64 {
        self.array_bytes / self.n_devices as u64
    }
}

/// Kernel-executed reduce-scatter variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsVariant {
    /// Sender reads local + received copies, reduces on CUs, ships the
    /// partial; the last arrival is folded with the local copy in a final
    /// pass. Per device: reads (2N-1)*S/N, writes N*S/N.
    SenderReduceFold,
    /// Receiver-side reduction, uniform per-step cost: 2 reads + 1 write per
    /// element share each step. Per device: reads 2(N-1)*S/N, writes (N-1)*S/N.
    Uniform,
    /// Near-memory updates at the receiver: 1 read per step, no final fold.
    /// Per device: reads (N-1)*S/N, updates (N-1)*S/N.
    Nmc,
}

/// Chunk that device `dev` sends at ring step `step` (1-based), flowing
/// toward the predecessor. At the final step it receives chunk (dev-1),
/// which it ends up owning.
pub fn rs_sent_chunk(dev: usize, step: usize, n: usize) -> usize {
    (dev + step - 1) % n
}

/// Chunk arriving at `dev` during ring step `step` (1-based).
pub fn rs_received_chunk(dev: usize, step: usize, n: usize) -> usize {
    (dev + step) % n
}

/// Chunk device `dev` holds fully reduced after ring reduce-scatter.
pub fn rs_owned_chunk(dev: usize, n: usize) -> usize {
    (dev + n - 1) % n
}

/// All-gather: device `dev` starts from its owned chunk and forwards what it
/// received last step. `owned` is the per-device owned chunk after RS.
pub fn ag_sent_chunk(owned: usize, step: usize, n: usize) -> usize {
    (owned + step - 1) % n
}

pub fn ag_received_chunk(owned: usize, step: usize, n: usize) -> usize {
    (owned + step) % n
}

// ---------------------------------------------------------------------------
// Brute-force functional oracles (test references, independent of the
// event-driven path)
// ---------------------------------------------------------------------------

/// Elementwise sum of every device's array: the reduce-scatter/all-reduce
/// reference.
pub fn oracle_elementwise_sum<T: Scalar>(inputs: &[Vec<T>]) -> Vec<T> {
    let len = inputs[0].len();
    let mut out = vec![T::zero(); len];
    for arr in inputs {
        assert_eq!(arr.len(), len);
        for (o, &v) in out.iter_mut().zip(arr) {
            *o = o.accumulate(v).expect("oracle overflow");
        }
    }
    out
}

/// Reduce-scatter reference: device d ends holding the summed chunk
/// (d-1) mod N.
pub fn oracle_reduce_scatter<T: Scalar>(inputs: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = inputs.len();
    let chunk = inputs[0].len() / n;
    let sum = oracle_elementwise_sum(inputs);
    (0..n)
        .map(|d| {
            let c = rs_owned_chunk(d, n);
            sum[c * chunk..(c + 1) * chunk].to_vec()
        })
        .collect()
}

/// All-gather reference: every device ends holding the concatenation of all
/// owned chunks, in chunk order.
pub fn oracle_all_gather<T: Scalar>(owned_chunks: &[(usize, Vec<T>)], n: usize) -> Vec<T> {
    let chunk = owned_chunks[0].1.len();
    let mut out = vec![T::zero(); chunk * n];
    for (c, data) in owned_chunks {
        out[c * chunk..(c + 1) * chunk].copy_from_slice(data);
    }
    out
}

/// All-reduce reference: elementwise sum replicated on all devices.
pub fn oracle_all_reduce<T: Scalar>(inputs: &[Vec<T>]) -> Vec<T> {
    oracle_elementwise_sum(inputs)
}

/// All-to-all as an all-gather variant without local retention: device d ends
/// with chunk d of every peer, concatenated by source device.
pub fn functional_all_to_all<T: Scalar>(inputs: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = inputs.len();
    let chunk = inputs[0].len() / n;
    (0..n)
        .map(|d| {
            let mut out = Vec::with_capacity(chunk * n);
            for src in inputs {
                out.extend_from_slice(&src[d * chunk..(d + 1) * chunk]);
            }
            out
        })
        .collect()
}
