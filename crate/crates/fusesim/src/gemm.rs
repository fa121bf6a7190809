//! GEMM decomposition into workgroup/wavefront tiles and stages.
//!
//! Output is laid out column-major with row-major WG ids, so a WF's rows are
//! non-contiguous in memory. WGs are *scheduled* chunk-major (all WGs whose
//! tiles start inside collective chunk 0 first, then chunk 1, ...), which is
//! what lets devices stagger chunk production for fused collectives; a stage
//! is the window of WGs the CUs can co-resident.

use crate::config::TileConfig;
use crate::config::ConfigError;
use crate::scalar::Scalar;

/// GEMM dimensions. `m`/`n` are the output; `k` is the dot-product dimension
/// (tensor slicing by degree t divides `k` and leaves `m`, `n` unchanged).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GemmShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub element_bytes: usize,
}

impl GemmShape {
    pub fn new(m: usize, n: usize, k: usize, element_bytes: usize) -> GemmShape {
        GemmShape { m, n, k, element_bytes }
    }

    pub fn output_elems(&self) -> usize {
        self.m * self.n
    }

    pub fn output_bytes(&self) -> u64 {
        (self.m * self.n * self.element_bytes) as u64
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.m as f64 * self.n as f64 * self.k as f64
    }
}

/// Half-open output rectangle, rows `[r0, r1)` x cols `[c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Rect {
    pub fn is_empty(&self) -> bool {
        self.r0 >= self.r1 || self.c0 >= self.c1
    }

    pub fn area(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }
}

/// Decomposition of one device's GEMM into scheduled stages of WGs.
#[derive(Debug, Clone)]
pub struct StageSchedule {
    pub shape: GemmShape,
    pub tiles: TileConfig,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub wg_count: usize,
    pub wgs_per_stage: usize,
    pub n_stages: usize,
    pub n_chunks: usize,
    /// Output elements per collective chunk (exact: chunks divide the output).
    pub chunk_elems: usize,
    /// Chunk production order for this device (a rotation of 0..n_chunks).
    pub chunk_order: Vec<usize>,
    /// All WG ids in scheduled order; stages are consecutive windows.
    pub wg_order: Vec<u32>,
}

impl StageSchedule {
    pub fn stage_wgs(&self, stage: usize) -> &[u32] {
        let lo = stage * self.wgs_per_stage;
        let hi = ((stage + 1) * self.wgs_per_stage).min(self.wg_count);
        &self.wg_order[lo..hi]
    }

    /// WG grid coordinates from its row-major id.
    pub fn wg_rc(&self, wg: u32) -> (usize, usize) {
        let wg = wg as usize;
        (wg / self.grid_cols, wg % self.grid_cols)
    }

    /// The WG's output tile, clipped to the real output.
    pub fn wg_rect(&self, wg: u32) -> Rect {
        let (gr, gc) = self.wg_rc(wg);
        Rect {
            r0: gr * self.tiles.wg_tile_m,
            r1: ((gr + 1) * self.tiles.wg_tile_m).min(self.shape.m),
            c0: gc * self.tiles.wg_tile_n,
            c1: ((gc + 1) * self.tiles.wg_tile_n).min(self.shape.n),
        }
    }

    /// WF grid within a WG is (wg_tile_m/wf_tile_m) x (wg_tile_n/wf_tile_n).
    pub fn wfs_grid(&self) -> (usize, usize) {
        (
            self.tiles.wg_tile_m / self.tiles.wf_tile_m,
            self.tiles.wg_tile_n / self.tiles.wf_tile_n,
        )
    }

    /// The WF's output tile, clipped; may be empty at the ragged edge.
    pub fn wf_rect(&self, wg: u32, wf: u8) -> Rect {
        let (gr, gc) = self.wg_rc(wg);
        let (_, wf_cols) = self.wfs_grid();
        let wfr = wf as usize / wf_cols;
        let wfc = wf as usize % wf_cols;
        let r0 = gr * self.tiles.wg_tile_m + wfr * self.tiles.wf_tile_m;
        let c0 = gc * self.tiles.wg_tile_n + wfc * self.tiles.wf_tile_n;
        Rect {
            r0: r0.min(self.shape.m),
            r1: (r0 + self.tiles.wf_tile_m).min(self.shape.m),
            c0: c0.min(self.shape.n),
            c1: (c0 + self.tiles.wf_tile_n).min(self.shape.n),
        }
    }

    /// Driver-visible WF tile size in elements: padded output / WF count.
    /// Ragged-edge WFs cover fewer real elements; their tracker thresholds
    /// use clipped counts.
    pub fn wf_tile_size(&self) -> usize {
        let padded = self.grid_rows
            * self.tiles.wg_tile_m
            * self.grid_cols
            * self.tiles.wg_tile_n;
        let wf_count = self.wg_count * self.tiles.wfs_per_wg;
        assert!(
            padded.is_multiple_of(wf_count),
            "padded output {} not divisible by WF count {}",
            padded,
            wf_count
        );
        padded / wf_count
    }

    /// Merged, clipped row intervals touched by a stage (input A rows).
    pub fn stage_row_intervals(&self, stage: usize) -> Vec<(usize, usize)> {
        let mut bands = vec![false; self.grid_rows];
        for &wg in self.stage_wgs(stage) {
            bands[self.wg_rc(wg).0] = true;
        }
        merge_bands(&bands, self.tiles.wg_tile_m, self.shape.m)
    }

    /// Merged, clipped column intervals touched by a stage (input B cols).
    pub fn stage_col_intervals(&self, stage: usize) -> Vec<(usize, usize)> {
        let mut bands = vec![false; self.grid_cols];
        for &wg in self.stage_wgs(stage) {
            bands[self.wg_rc(wg).1] = true;
        }
        merge_bands(&bands, self.tiles.wg_tile_n, self.shape.n)
    }

    /// Output elements produced by a stage (sum of clipped WG tile areas).
    pub fn stage_output_elems(&self, stage: usize) -> usize {
        self.stage_wgs(stage).iter().map(|&wg| self.wg_rect(wg).area()).sum()
    }

    /// Compute-side stage latency: 2 * elems * K / machine FLOP rate.
    pub fn stage_compute_ns(&self, stage: usize, flops_per_ns: f64) -> u64 {
        let flops = 2.0 * self.stage_output_elems(stage) as f64 * self.shape.k as f64;
        (flops / flops_per_ns).ceil() as u64
    }
}

fn merge_bands(bands: &[bool], band_size: usize, clip: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (b, &on) in bands.iter().enumerate() {
        if !on {
            continue;
        }
        let lo = b * band_size;
        let hi = ((b + 1) * band_size).min(clip);
        match out.last_mut() {
            Some(last) if last.1 == lo => last.1 = hi,
            _ => out.push((lo, hi)),
        }
    }
    out
}

/// Decompose a GEMM into chunk-major scheduled stages. `n_chunks = 1` gives
/// plain row-major scheduling. Chunks must divide the output exactly.
pub fn decompose(
    shape: GemmShape,
    tiles: TileConfig,
    n_cus: usize,
    wgs_per_cu: usize,
    n_chunks: usize,
) -> Result<StageSchedule, ConfigError> {
    if n_cus == 0 || wgs_per_cu == 0 {
        return Err(ConfigError::invalid("system.n_cus", "need CUs to schedule WGs"));
    }
    if shape.m == 0 || shape.n == 0 || shape.k == 0 {
        return Err(ConfigError::invalid("workload", "GEMM dims must be positive"));
    }
    if !shape.output_elems().is_multiple_of(n_chunks) {
        return Err(ConfigError::invalid(
            "workload",
            format!("output of {} elements is not divisible into {} chunks", shape.output_elems(), n_chunks),
        ));
    }
    let grid_rows = shape.m.div_ceil(tiles.wg_tile_m);
    let grid_cols = shape.n.div_ceil(tiles.wg_tile_n);
    let wg_count = grid_rows * grid_cols;
    let wgs_per_stage = n_cus * wgs_per_cu;
    let n_stages = wg_count.div_ceil(wgs_per_stage);
    let chunk_elems = shape.output_elems() / n_chunks;

    let mut sched = StageSchedule {
        shape,
        tiles,
        grid_rows,
        grid_cols,
        wg_count,
        wgs_per_stage,
        n_stages,
        n_chunks,
        chunk_elems,
        chunk_order: (0..n_chunks).collect(),
        wg_order: Vec::new(),
    };
    sched.wg_order = schedule_order(&sched);
    Ok(sched)
}

/// Rotate the device's chunk production order by its ring position:
/// device 0 produces (0, 1, ..., N-1), device 1 produces (1, 2, ..., 0).
pub fn stagger(schedule: &StageSchedule, device_id: usize, n_devices: usize) -> StageSchedule {
    assert_eq!(
        schedule.n_chunks, n_devices,
        "staggering needs chunk count == device count"
    );
    let mut out = schedule.clone();
    out.chunk_order = (0..n_devices).map(|i| (device_id + i) % n_devices).collect();
    out.wg_order = schedule_order(&out);
    out
}

/// Scheduling position of a WG under this device's chunk order: the earliest
/// position among the chunks its tile intersects. A tile straddling a chunk
/// boundary must run no later than the earlier-scheduled side needs it, or a
/// sliver of a communicated chunk would be produced long after the rest and
/// stall the collective's trigger chain.
fn wg_position(s: &StageSchedule, wg: u32) -> usize {
    let r = s.wg_rect(wg);
    let first_elem = r.c0 * s.shape.m + r.r0;
    let last_elem = (r.c1 - 1) * s.shape.m + (r.r1 - 1);
    let c_lo = (first_elem / s.chunk_elems).min(s.n_chunks - 1);
    let c_hi = (last_elem / s.chunk_elems).min(s.n_chunks - 1);
    let first_chunk = s.chunk_order[0];
    (c_lo..=c_hi)
        .map(|c| (c + s.n_chunks - first_chunk) % s.n_chunks)
        .min()
        .expect("tile intersects at least one chunk")
}

fn schedule_order(s: &StageSchedule) -> Vec<u32> {
    let mut by_pos: Vec<Vec<u32>> = vec![Vec::new(); s.n_chunks];
    for wg in 0..s.wg_count as u32 {
        by_pos[wg_position(s, wg)].push(wg);
    }
    let mut order = Vec::with_capacity(s.wg_count);
    for bucket in &by_pos {
        order.extend_from_slice(bucket);
    }
    order
}

/// Per-WG input bytes read, before any cross-WG deduplication:
/// an A tile of wg_tile_m x K plus a B tile of K x wg_tile_n.
pub fn wg_read_bytes(shape: &GemmShape, tiles: &TileConfig) -> u64 {
    ((tiles.wg_tile_m + tiles.wg_tile_n) * shape.k * shape.element_bytes) as u64
}

/// Exact column-major matmul for functional verification (small scales).
pub fn functional_matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    n: usize,
    k: usize,
) -> Result<Vec<T>, ConfigError> {
    if a.len() != m * k || b.len() != k * n {
        return Err(ConfigError::invalid("functional", "matmul dimension mismatch"));
    }
    let mut c = vec![T::zero(); m * n];
    for col in 0..n {
        for kk in 0..k {
            let bv = b[col * k + kk];
            if bv == T::zero() {
                continue;
            }
            for row in 0..m {
                let prod = a[kk * m + row] * bv;
                c[col * m + row] = c[col * m + row]
                    .accumulate(prod)
                    .expect("integer overflow in functional matmul");
            }
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiles() -> TileConfig {
        TileConfig::default()
    }

    fn gpu() -> (usize, usize) {
        (80, 4)
    }

    #[test]
    fn wg_count_is_invariant_under_k_slicing() {
        let (cus, per) = gpu();
        let full = decompose(GemmShape::new(8192, 8192, 4096, 2), tiles(), cus, per, 8).unwrap();
        let sliced = decompose(GemmShape::new(8192, 8192, 512, 2), tiles(), cus, per, 8).unwrap();
        assert_eq!(full.wg_count, 4096);
        assert_eq!(full.wg_count, sliced.wg_count);
        assert_eq!(full.n_stages, sliced.n_stages);
        assert_eq!(full.wf_tile_size(), sliced.wf_tile_size());
    }

    #[test]
    fn ceiling_arithmetic_for_ragged_grids() {
        let (cus, per) = gpu();
        let s = decompose(GemmShape::new(8192, 4256, 2128, 2), tiles(), cus, per, 8).unwrap();
        assert_eq!(s.wg_count, 64 * 34);
        assert_eq!(s.wgs_per_stage, 320);
        assert_eq!(s.n_stages, 7);
    }

    #[test]
    fn single_wg_gemm() {
        let (cus, per) = gpu();
        let s = decompose(GemmShape::new(128, 128, 64, 2), tiles(), cus, per, 1).unwrap();
        assert_eq!(s.wg_count, 1);
        assert_eq!(s.n_stages, 1);
        // One WG of 8 WFs: each WF covers (M*N)/8.
        assert_eq!(s.wf_tile_size(), 128 * 128 / 8);
    }

    #[test]
    fn zero_cus_is_an_error() {
        assert!(decompose(GemmShape::new(128, 128, 64, 2), tiles(), 0, 4, 1).is_err());
    }

    #[test]
    fn stagger_rotates_chunk_order() {
        let (cus, per) = gpu();
        let s = decompose(GemmShape::new(1024, 1024, 64, 2), tiles(), cus, per, 4).unwrap();
        assert_eq!(stagger(&s, 0, 4).chunk_order, vec![0, 1, 2, 3]);
        assert_eq!(stagger(&s, 1, 4).chunk_order, vec![1, 2, 3, 0]);
        let s2 = decompose(GemmShape::new(256, 256, 64, 2), tiles(), cus, per, 2).unwrap();
        assert_eq!(stagger(&s2, 1, 2).chunk_order, vec![1, 0]);
    }

    #[test]
    fn rotation_composed_n_times_is_identity() {
        let (cus, per) = gpu();
        let n = 8;
        let base = decompose(GemmShape::new(1024, 1024, 64, 2), tiles(), cus, per, n).unwrap();
        let mut order = base.chunk_order.clone();
        for _ in 0..n {
            // rotating by one, n times
            let s = StageSchedule { chunk_order: order.clone(), ..base.clone() };
            order = stagger(&s, 1, n).chunk_order.iter().map(|&c| s.chunk_order[c]).collect();
        }
        // composing the device-1 rotation n times returns to identity
        let mut got: Vec<usize> = (0..n).collect();
        for _ in 0..n {
            got = got.iter().map(|&c| (c + 1) % n).collect();
        }
        assert_eq!(got, (0..n).collect::<Vec<_>>());
        assert_eq!(base.chunk_order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn wf_tile_size_from_driver_formula() {
        let (cus, per) = gpu();
        let s = decompose(GemmShape::new(1024, 1024, 64, 2), tiles(), cus, per, 1).unwrap();
        assert_eq!(s.wg_count, 64);
        assert_eq!(s.wg_count * s.tiles.wfs_per_wg, 512);
        assert_eq!(s.wf_tile_size(), 1024 * 1024 / 512);
    }

    #[test]
    fn output_coverage_is_exact_once() {
        // Union of clipped WF tiles covers M x N exactly once, including a
        // ragged edge in N.
        let (cus, per) = gpu();
        let s = decompose(GemmShape::new(256, 200, 32, 2), tiles(), cus, per, 1).unwrap();
        let mut hits = vec![0u8; 256 * 200];
        for wg in 0..s.wg_count as u32 {
            for wf in 0..s.tiles.wfs_per_wg as u8 {
                let r = s.wf_rect(wg, wf);
                for c in r.c0..r.c1 {
                    for row in r.r0..r.r1 {
                        hits[c * 256 + row] += 1;
                    }
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn per_wg_read_footprint_at_k_one() {
        let shape = GemmShape::new(8192, 4256, 1, 2);
        assert_eq!(wg_read_bytes(&shape, &tiles()), (128 + 128) * 2);
    }

    #[test]
    fn matmul_identity() {
        let m = 4;
        let mut a = vec![0i64; m * m];
        for i in 0..m {
            a[i * m + i] = 1;
        }
        let b: Vec<i64> = (0..m * m).map(|x| x as i64).collect();
        assert_eq!(functional_matmul(&a, &b, m, m, m).unwrap(), b);
    }

    #[test]
    fn matmul_all_ones() {
        let a = vec![1i64; 4];
        let b = vec![1i64; 4];
        assert_eq!(functional_matmul(&a, &b, 2, 2, 2).unwrap(), vec![2; 4]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (m, n, k) = (8, 8, 8);
        let a: Vec<i64> = (0..m * k).map(|_| rng.gen_range(-9..=9)).collect();
        let b: Vec<i64> = (0..k * n).map(|_| rng.gen_range(-9..=9)).collect();
        let mut want = vec![0i64; m * n];
        for row in 0..m {
            for col in 0..n {
                let mut acc = 0i64;
                for kk in 0..k {
                    acc += a[kk * m + row] * b[col * k + kk];
                }
                want[col * m + row] = acc;
            }
        }
        assert_eq!(functional_matmul(&a, &b, m, n, k).unwrap(), want);
    }

    #[test]
    fn full_stage_write_bytes() {
        // a stage of 320 interior 128x128 fp16 tiles writes 10,485,760 bytes
        let (cus, per) = gpu();
        let s = decompose(GemmShape::new(8192, 8192, 512, 2), tiles(), cus, per, 1).unwrap();
        assert_eq!(s.stage_wgs(0).len(), 320);
        assert_eq!(s.stage_output_elems(0) * 2, 10_485_760);
    }

    #[test]
    fn stage_intervals_merge_adjacent_bands() {
        let (cus, per) = gpu();
        // chunk-major order over 4 chunks: every stage spans all rows
        let s = decompose(GemmShape::new(1024, 1024, 64, 2), tiles(), cus, per, 4).unwrap();
        let rows = s.stage_row_intervals(0);
        assert_eq!(rows, vec![(0, 1024)]);
    }
}
