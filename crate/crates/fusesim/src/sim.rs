//! Top-level simulator: wires the event queue, devices (LLC + channels +
//! tracker + DMA program + functional store), and links into the five run
//! modes, and assembles reports.
//!
//! A run executes as a sequence of phases (GEMM, reduce-scatter, all-gather,
//! or the fused GEMM-RS region); each phase drives the event queue to
//! quiescence, so phase spans are exact and the ideal-mode identities hold by
//! construction. All per-device iteration is in fixed order: identical
//! (config, mode, seed) produce byte-identical reports and traces.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collectives::{ag_sent_chunk, rs_owned_chunk, rs_received_chunk, rs_sent_chunk, RsVariant};
use crate::config::{ArbiterKind, CollectiveKind, ConfigError, SimConfig};
use crate::dma::{
    direct_rs_program, ring_rs_program, wf_range_segments, BlockRec, DmaOp, FusedProgram, MapMode,
};
use crate::engine::{Action, EventQueue, Ns, RunMode};
use crate::gemm::{decompose, stagger, GemmShape, StageSchedule};
use crate::memory::{
    channel_of, Channel, FunctionalStore, Llc, MemTransaction, Stream, Token, TrafficCat, TxnKind,
    WfMeta,
};
use crate::report::{DramBytes, LinkTraffic, RuntimeBreakdown, SimReport, SCHEMA_VERSION};
use crate::scalar::Scalar;
use crate::topology::{LinkState, Topology, TopologyKind};
use crate::tracker::TrackerTable;
use crate::workloads;

const A_BASE: u64 = 1 << 40;
const B_BASE: u64 = 2 << 40;
const OUT_BASE: u64 = 3 << 40;
const RECV_BASE: u64 = 4 << 40;

/// Streaming granularity of kernel-executed collectives: one link message
/// per sub-block, so a step's transfer pipelines behind its reads.
const SBLOCK_BYTES: usize = 32 * 1024;

/// A stage's input reads issue in this many waves across its compute window
/// (tiled GEMMs double-buffer; only the output writes are bursty).
const READ_WAVES: usize = 16;

/// Functional payloads are carried only at small scale.
pub const FUNCTIONAL_ELEMS_LIMIT: usize = 1 << 20;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("tracker: {0}")]
    Tracker(#[from] crate::tracker::TrackerError),
    #[error("simulation invariant violated: {0}")]
    Invariant(String),
}

/// Functional results extracted after a run.
#[derive(Debug, Clone)]
pub struct FunctionalResult<T: Scalar> {
    /// Per-device producer output (GEMM result) or collective input array.
    pub producer_outputs: Vec<Vec<T>>,
    /// Per-device (chunk id, values) owned after a reduce-scatter.
    pub owned_chunks: Vec<(usize, Vec<T>)>,
    /// Per-device full arrays after an all-gather (when one ran).
    pub gathered: Option<Vec<Vec<T>>>,
}

#[derive(Debug)]
pub struct RunArtifacts<T: Scalar> {
    pub report: SimReport,
    pub functional: Option<FunctionalResult<T>>,
    pub trace: Option<String>,
}

// ---------------------------------------------------------------------------
// Link messages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct RemoteRec {
    wg: u32,
    wf: u8,
    elem_lo: usize,
    elements: u32,
    bytes: u32,
}

#[derive(Debug)]
enum MsgBody<T: Scalar> {
    /// Fine-grained producer store to a peer (remote_map).
    RemoteStore { rec: RemoteRec, payload: Option<Box<[T]>>, update: bool },
    /// A fired DMA command shipping one chunk.
    DmaChunk {
        src: usize,
        src_cmd: u32,
        chunk: usize,
        elem_lo: usize,
        elem_hi: usize,
        blocks: Vec<BlockRec>,
        op: DmaOp,
        payload: Option<Vec<T>>,
    },
    /// Kernel-executed collective sub-block.
    CollBlock { step: usize, sblock: usize, elem_off: usize, elems: usize, payload: Option<Vec<T>> },
}

#[derive(Debug)]
struct LinkMessage<T: Scalar> {
    dst: usize,
    body: MsgBody<T>,
}

// ---------------------------------------------------------------------------
// Per-device state
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone)]
struct DeviceCounters {
    dram: DramBytes,
    emitted_gemm_write_bytes: u64,
}

impl DeviceCounters {
    fn add(&mut self, cat: TrafficCat, bytes: u64) {
        match cat {
            TrafficCat::GemmRead => self.dram.gemm_read += bytes,
            TrafficCat::GemmWrite => self.dram.gemm_write += bytes,
            TrafficCat::RsRead => self.dram.rs_read += bytes,
            TrafficCat::RsWrite => self.dram.rs_write += bytes,
            TrafficCat::AgRead => self.dram.ag_read += bytes,
            TrafficCat::AgWrite => self.dram.ag_write += bytes,
        }
    }
}

struct Device<T: Scalar> {
    channels: Vec<Channel<T>>,
    llc: Llc,
    tracker: TrackerTable,
    program: Option<FusedProgram>,
    store: FunctionalStore<T>,
    counters: DeviceCounters,
}

/// GEMM execution state for one device.
struct GemmRun<T: Scalar> {
    schedule: StageSchedule,
    stage: usize,
    pending_reads: u64,
    /// Read waves of the current stage not yet issued.
    read_waves: Vec<Vec<(u64, u64)>>,
    waves_left: usize,
    compute_done: bool,
    writes_emitted: bool,
    pending_writes: u64,
    done: bool,
    fused_routing: bool,
    values: Option<Vec<T>>,
}

#[derive(Debug, Clone, Copy)]
struct WriteRec {
    vaddr: u64,
    bytes: u32,
    elements: u32,
    elem_lo: usize,
    wg: u32,
    wf: u8,
    range_id: u16,
    mode: MapMode,
    target: Option<usize>,
}

// Kernel-executed collective phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CollOp {
    Rs(RsVariant),
    Ag,
}

struct PendingArrival<T: Scalar> {
    step: usize,
    sblock: usize,
    elem_off: usize,
    elems: usize,
    payload: Option<Vec<T>>,
}

struct CollPhase<T: Scalar> {
    op: CollOp,
    chunk_elems: usize,
    sblock_elems: usize,
    sblocks: usize,
    devs: Vec<CollDev<T>>,
    owned: Vec<usize>,
}

struct CollDev<T: Scalar> {
    step: usize,
    out_reads_left: Vec<u32>,
    sends_left: usize,
    /// Sub-blocks of the current step whose incoming chain is unfinished.
    arrivals_left: usize,
    /// Remaining transactions in the active chain segment, per sub-block.
    chain_left: Vec<u32>,
    pending_reduced: Vec<Option<Vec<T>>>,
    /// Arrivals for a step this device has not started yet.
    buffered: VecDeque<PendingArrival<T>>,
    fold_reads_left: Vec<u32>,
    /// Sub-blocks whose fold write has not been issued yet.
    fold_blocks_left: usize,
    /// Outstanding fold-write transactions.
    fold_writes_left: usize,
    steps_done: bool,
    done: bool,
}

/// Fused GEMM-RS phase bookkeeping: outstanding gather reads per command,
/// plus chunk arrivals waiting for their source gathers to finish (the DMA
/// pipelines reads into the link, so the transfer is link-bound and delivery
/// waits on whichever finishes last).
struct FusedPhase {
    dma_reads_left: Vec<Vec<u32>>,
    held_arrivals: Vec<Vec<Option<usize>>>,
}

#[derive(Debug, Default)]
struct Stamps {
    phase_start: Ns,
    gemm_last: Ns,
}

struct PhaseSpans {
    gemm: Ns,
    rs: Ns,
    ag: Ns,
    overlap: Ns,
    total: Ns,
}

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

pub struct Simulator<T: Scalar> {
    pub cfg: SimConfig,
    mode: RunMode,
    functional: bool,
    queue: EventQueue,
    topo: Topology,
    links: Vec<LinkState>,
    devices: Vec<Device<T>>,
    msgs: Vec<Option<LinkMessage<T>>>,
    free_msgs: Vec<usize>,
    gemm: Vec<GemmRun<T>>,
    coll: Option<CollPhase<T>>,
    fused: Option<FusedPhase>,
    stamps: Stamps,
    trigger_count: u64,
    cu_reduction_ns: u64,
}

impl<T: Scalar> Simulator<T> {
    pub fn new(cfg: &SimConfig, mode: RunMode) -> Result<Simulator<T>, SimError> {
        cfg.validate()?;
        let sys = &cfg.system;
        let topo = match sys.topology {
            TopologyKind::Ring => {
                Topology::ring(sys.n_gpus, sys.link_bandwidth_gbps, sys.link_latency_ns)?
            }
            TopologyKind::FullyConnected => {
                Topology::fully_connected(sys.n_gpus, sys.link_bandwidth_gbps, sys.link_latency_ns)?
            }
        };
        let links = vec![LinkState::default(); topo.links.len()];
        // fused-mca selects the communication-aware policy; other modes
        // honor the config key (round-robin unless overridden for experiments)
        let arbiter = if mode == RunMode::FusedMca { ArbiterKind::Mca } else { cfg.mca.arbiter };
        let devices = (0..sys.n_gpus)
            .map(|_| Device {
                channels: (0..sys.n_channels).map(|_| Channel::new(sys, arbiter, &cfg.mca)).collect(),
                llc: Llc::new((sys.llc_mb as u64) << 20, sys.llc_line_bytes as u64, sys.llc_ways),
                tracker: TrackerTable::new(&cfg.tracker),
                program: None,
                store: FunctionalStore::default(),
                counters: DeviceCounters::default(),
            })
            .collect();
        let mut queue = EventQueue::new();
        if cfg.sim.trace {
            queue.enable_trace();
        }
        Ok(Simulator {
            cfg: cfg.clone(),
            mode,
            functional: cfg.sim.functional,
            queue,
            topo,
            links,
            devices,
            msgs: Vec::new(),
            free_msgs: Vec::new(),
            gemm: Vec::new(),
            coll: None,
            fused: None,
            stamps: Stamps::default(),
            trigger_count: 0,
            cu_reduction_ns: 0,
        })
    }

    fn n(&self) -> usize {
        self.topo.n_devices
    }

    fn eb(&self) -> usize {
        self.cfg.workload.element_bytes
    }

    // -- event plumbing -----------------------------------------------------

    fn post_msg(&mut self, at: Ns, msg: LinkMessage<T>) {
        let idx = match self.free_msgs.pop() {
            Some(i) => {
                self.msgs[i] = Some(msg);
                i
            }
            None => {
                self.msgs.push(Some(msg));
                self.msgs.len() - 1
            }
        };
        self.queue.post(at, Action::LinkArrive { msg: idx });
    }

    fn hold_msg(&mut self, msg: LinkMessage<T>) -> usize {
        match self.free_msgs.pop() {
            Some(i) => {
                self.msgs[i] = Some(msg);
                i
            }
            None => {
                self.msgs.push(Some(msg));
                self.msgs.len() - 1
            }
        }
    }

    fn run_until_idle(&mut self) -> Result<Ns, SimError> {
        while let Some(action) = self.queue.pop() {
            match action {
                Action::ChannelComplete { dev, ch } => {
                    let txn = self.devices[dev].channels[ch].complete();
                    self.devices[dev].counters.add(txn.cat, txn.bytes as u64);
                    self.on_serviced(&txn)?;
                    self.pump_channel(dev, ch);
                }
                Action::LinkArrive { msg } => {
                    let m = self.msgs[msg].take().expect("message delivered once");
                    self.free_msgs.push(msg);
                    self.on_arrival(m)?;
                }
                Action::ComputeDone { dev, stage } => {
                    debug_assert_eq!(self.gemm[dev].stage, stage);
                    self.gemm[dev].compute_done = true;
                    self.maybe_start_writes(dev)?;
                }
                Action::ReadWave { dev, stage, wave } => {
                    self.issue_read_wave(dev, stage, wave)?;
                }
            }
        }
        Ok(self.queue.now())
    }

    fn pump_channel(&mut self, dev: usize, ch: usize) {
        let now = self.queue.now();
        let c = &mut self.devices[dev].channels[ch];
        c.pump(now);
        if let Some(done) = c.try_start(now) {
            self.queue.post(done, Action::ChannelComplete { dev, ch });
        }
    }

    /// Apply functional payload and tracker observation at MC enqueue, then
    /// queue the transaction and pump its channel.
    fn enqueue_txn(&mut self, dev: usize, txn: MemTransaction<T>) -> Result<(), SimError> {
        let now = self.queue.now();
        let trigger = {
            let d = &mut self.devices[dev];
            if let Some(payload) = txn.payload.as_deref() {
                if txn.kind != TxnKind::Read {
                    d.store.apply(txn.vaddr, txn.kind, payload);
                }
            }
            match (&txn.meta, txn.kind) {
                (Some(meta), TxnKind::NmcUpdate | TxnKind::Write) => {
                    d.tracker.observe(meta, txn.vaddr)?
                }
                _ => None,
            }
        };
        let ch = channel_of(txn.vaddr, self.cfg.system.n_channels);
        self.devices[dev].channels[ch].enqueue(txn, now);
        self.pump_channel(dev, ch);
        if let Some(t) = trigger {
            if let Some(cmd) = t.cmd {
                self.on_block_ready(dev, cmd, t.start_vaddr, t.elements)?;
            }
        }
        Ok(())
    }

    /// Split a contiguous span into batch-sized transactions and enqueue.
    /// Returns the number of transactions created.
    #[allow(clippy::too_many_arguments)]
    fn enqueue_span(
        &mut self,
        dev: usize,
        addr: u64,
        bytes: u64,
        kind: TxnKind,
        stream: Stream,
        cat: TrafficCat,
        token: Token,
    ) -> Result<u64, SimError> {
        debug_assert!(bytes > 0);
        let batch = self.cfg.sim.batch_bytes as u64;
        let mut at = addr;
        let end = addr + bytes;
        let mut count = 0;
        while at < end {
            let take = batch.min(end - at);
            let mut txn = MemTransaction::new(at, take as u32, kind, stream, cat);
            txn.token = token;
            self.enqueue_txn(dev, txn)?;
            at += take;
            count += 1;
        }
        Ok(count)
    }

    // -- GEMM ----------------------------------------------------------------

    fn workload_shape(&self) -> Result<GemmShape, ConfigError> {
        let w = &self.cfg.workload;
        if w.is_explicit() {
            return Ok(GemmShape::new(w.m, w.n, w.k, w.element_bytes));
        }
        let sub = workloads::Sublayer::parse(&w.sublayer).ok_or_else(|| {
            ConfigError::invalid("workload.sublayer", format!("unknown sublayer `{}`", w.sublayer))
        })?;
        let case = if w.is_custom_model() {
            workloads::custom_sublayer_case(w.hidden, w.seq_len, w.batch, w.tp, sub, w.element_bytes)?
        } else {
            workloads::sublayer_case(&w.model, w.tp, sub, w.element_bytes)?
        };
        Ok(case.shape)
    }

    fn setup_gemm(&mut self, fused_routing: bool) -> Result<(), SimError> {
        let shape = self.workload_shape()?;
        let tiles = self.cfg.tiles;
        let sys = &self.cfg.system;
        let n = self.n();
        let base = decompose(shape, tiles, sys.n_cus, tiles.wgs_per_cu, n)?;
        if self.functional && shape.output_elems() > FUNCTIONAL_ELEMS_LIMIT {
            return Err(ConfigError::invalid(
                "sim.functional",
                format!("functional payloads limited to {FUNCTIONAL_ELEMS_LIMIT} output elements"),
            )
            .into());
        }
        let mut runs = Vec::with_capacity(n);
        for dev in 0..n {
            let schedule = if fused_routing { stagger(&base, dev, n) } else { base.clone() };
            let values = if self.functional {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.cfg.sim.seed ^ (dev as u64 + 1).wrapping_mul(0x9e37_79b9),
                );
                let a: Vec<T> = random_ints(&mut rng, shape.m * shape.k);
                let b: Vec<T> = random_ints(&mut rng, shape.k * shape.n);
                let c = crate::gemm::functional_matmul(&a, &b, shape.m, shape.n, shape.k)?;
                let d = &mut self.devices[dev];
                d.store.alloc(OUT_BASE, shape.output_elems(), shape.element_bytes);
                d.store.alloc(RECV_BASE, shape.output_elems(), shape.element_bytes);
                Some(c)
            } else {
                None
            };
            runs.push(GemmRun {
                schedule,
                stage: 0,
                pending_reads: 0,
                read_waves: Vec::new(),
                waves_left: 0,
                compute_done: false,
                writes_emitted: false,
                pending_writes: 0,
                done: false,
                fused_routing,
                values,
            });
        }
        self.gemm = runs;
        Ok(())
    }

    fn start_all_stages(&mut self) -> Result<(), SimError> {
        for dev in 0..self.n() {
            self.start_stage(dev)?;
        }
        Ok(())
    }

    fn start_stage(&mut self, dev: usize) -> Result<(), SimError> {
        let now = self.queue.now();
        let stage = self.gemm[dev].stage;
        let flops_per_ns = self.cfg.system.flops_per_ns();
        let compute_ns = self.gemm[dev].schedule.stage_compute_ns(stage, flops_per_ns);
        self.gemm[dev].compute_done = false;
        self.gemm[dev].writes_emitted = false;
        self.queue.post(now + compute_ns, Action::ComputeDone { dev, stage });

        // Read phase: the stage's unique A/B footprint; the LLC deduplicates
        // across stages (and any replays within one).
        let shape = self.gemm[dev].schedule.shape;
        let eb = shape.element_bytes as u64;
        let (m, k) = (shape.m, shape.k);
        let rows = self.gemm[dev].schedule.stage_row_intervals(stage);
        let cols = self.gemm[dev].schedule.stage_col_intervals(stage);
        let mut spans: Vec<(u64, u64)> = Vec::new();
        if rows.len() == 1 && rows[0] == (0, m) {
            spans.push((A_BASE, (m * k) as u64 * eb));
        } else {
            for k_col in 0..k {
                for &(r0, r1) in &rows {
                    spans.push((A_BASE + ((k_col * m + r0) as u64) * eb, ((r1 - r0) as u64) * eb));
                }
            }
        }
        for &(c0, c1) in &cols {
            spans.push((B_BASE + ((c0 * k) as u64) * eb, (((c1 - c0) * k) as u64) * eb));
        }

        // Reads spread across the compute window in waves; writes burst at
        // the end of the stage.
        let total_bytes: u64 = spans.iter().map(|&(_, b)| b).sum();
        let wave_bytes = (total_bytes / READ_WAVES as u64).max(1);
        let mut waves: Vec<Vec<(u64, u64)>> = vec![Vec::new()];
        let mut acc = 0u64;
        for (addr, bytes) in spans {
            let mut at = addr;
            let mut left = bytes;
            while left > 0 {
                let room = wave_bytes.saturating_sub(acc);
                if room == 0 && waves.len() < READ_WAVES {
                    waves.push(Vec::new());
                    acc = 0;
                    continue;
                }
                let take = if waves.len() < READ_WAVES { left.min(room.max(1)) } else { left };
                waves.last_mut().unwrap().push((at, take));
                at += take;
                left -= take;
                acc += take;
            }
        }
        let n_waves = waves.len();
        self.gemm[dev].read_waves = waves;
        self.gemm[dev].waves_left = n_waves;
        self.gemm[dev].pending_reads = 0;
        let step = compute_ns / n_waves as u64;
        for w in 1..n_waves {
            self.queue.post(now + step * w as u64, Action::ReadWave { dev, stage, wave: w });
        }
        self.issue_read_wave(dev, stage, 0)
    }

    fn issue_read_wave(&mut self, dev: usize, stage: usize, wave: usize) -> Result<(), SimError> {
        debug_assert_eq!(self.gemm[dev].stage, stage);
        let spans = std::mem::take(&mut self.gemm[dev].read_waves[wave]);
        let token = Token::StageRead { dev: dev as u32, stage: stage as u32 };
        let mut issued = 0;
        for (addr, bytes) in spans {
            let misses = self.devices[dev].llc.probe_read(addr, bytes);
            for (maddr, mbytes) in misses {
                issued += self.enqueue_span(
                    dev,
                    maddr,
                    mbytes,
                    TxnKind::Read,
                    Stream::Compute,
                    TrafficCat::GemmRead,
                    token,
                )?;
            }
        }
        let g = &mut self.gemm[dev];
        g.pending_reads += issued;
        g.waves_left -= 1;
        // a wave that fully hits in the LLC leaves nothing pending
        self.maybe_start_writes(dev)
    }

    fn maybe_start_writes(&mut self, dev: usize) -> Result<(), SimError> {
        {
            let g = &self.gemm[dev];
            if g.done
                || g.writes_emitted
                || !g.compute_done
                || g.waves_left > 0
                || g.pending_reads > 0
            {
                return Ok(());
            }
        }
        self.gemm[dev].writes_emitted = true;
        let stage = self.gemm[dev].stage;
        let recs = self.stage_write_records(dev, stage);
        let token = Token::StageWrite { dev: dev as u32, stage: stage as u32 };
        let mut pending = 0u64;
        for rec in recs {
            self.devices[dev].counters.emitted_gemm_write_bytes += rec.bytes as u64;
            match rec.mode {
                MapMode::RemoteStore | MapMode::RemoteUpdate => {
                    let payload = self.sample_values(dev, rec.elem_lo, rec.elements as usize);
                    let target = rec.target.expect("remote range has a target");
                    let link = self.topo.link_id(dev, target);
                    let at = self.links[link].submit(
                        &self.topo.links[link],
                        self.queue.now(),
                        rec.bytes as u64,
                    );
                    self.post_msg(
                        at,
                        LinkMessage {
                            dst: target,
                            body: MsgBody::RemoteStore {
                                rec: RemoteRec {
                                    wg: rec.wg,
                                    wf: rec.wf,
                                    elem_lo: rec.elem_lo,
                                    elements: rec.elements,
                                    bytes: rec.bytes,
                                },
                                payload: payload.map(Vec::into_boxed_slice),
                                update: rec.mode == MapMode::RemoteUpdate,
                            },
                        },
                    );
                }
                _ => {
                    let fused = self.gemm[dev].fused_routing;
                    let kind = if fused { TxnKind::NmcUpdate } else { TxnKind::Write };
                    let payload =
                        self.sample_values(dev, rec.elem_lo, rec.elements as usize).map(Vec::into_boxed_slice);
                    let mut txn = MemTransaction::new(
                        rec.vaddr,
                        rec.bytes,
                        kind,
                        Stream::Compute,
                        TrafficCat::GemmWrite,
                    );
                    txn.token = token;
                    txn.payload = payload;
                    if fused {
                        txn.meta = Some(WfMeta {
                            wg: rec.wg,
                            wf: rec.wf,
                            range_id: rec.range_id,
                            elements: rec.elements,
                        });
                    }
                    self.enqueue_txn(dev, txn)?;
                    pending += 1;
                }
            }
        }
        self.gemm[dev].pending_writes = pending;
        if pending == 0 {
            self.finish_stage(dev)?;
        }
        Ok(())
    }

    /// Local GEMM output values for `[elem_lo, elem_lo + n)`.
    fn sample_values(&self, dev: usize, elem_lo: usize, n_elems: usize) -> Option<Vec<T>> {
        if !self.functional {
            return None;
        }
        self.gemm[dev].values.as_ref().map(|c| c[elem_lo..elem_lo + n_elems].to_vec())
    }

    fn stage_write_records(&self, dev: usize, stage: usize) -> Vec<WriteRec> {
        let g = &self.gemm[dev];
        let sched = &g.schedule;
        let eb = sched.shape.element_bytes;
        let m = sched.shape.m;
        // coalesced records aggregate scattered columns; functional payloads
        // need exact element positions, so they force column-run granularity
        let coalesce = self.cfg.sim.coalesce_output_tiles && !self.functional;
        let program = self.devices[dev].program.as_ref();
        let mut out = Vec::new();
        for &wg in sched.stage_wgs(stage) {
            for wf in 0..sched.tiles.wfs_per_wg as u8 {
                let rect = sched.wf_rect(wg, wf);
                if rect.is_empty() {
                    continue;
                }
                if coalesce {
                    match program {
                        Some(p) => {
                            for (range_id, elem_lo, elements) in
                                wf_range_segments(sched, &p.map, wg, wf)
                            {
                                let r = &p.map.ranges[range_id as usize];
                                out.push(WriteRec {
                                    vaddr: OUT_BASE + elem_lo as u64 * eb as u64,
                                    bytes: elements * eb as u32,
                                    elements,
                                    elem_lo,
                                    wg,
                                    wf,
                                    range_id,
                                    mode: r.mode,
                                    target: r.target,
                                });
                            }
                        }
                        None => {
                            let elements = rect.area() as u32;
                            let elem_lo = rect.c0 * m + rect.r0;
                            out.push(WriteRec {
                                vaddr: OUT_BASE + elem_lo as u64 * eb as u64,
                                bytes: elements * eb as u32,
                                elements,
                                elem_lo,
                                wg,
                                wf,
                                range_id: 0,
                                mode: MapMode::LocalOnly,
                                target: None,
                            });
                        }
                    }
                } else {
                    // one record per contiguous column run, split at
                    // address-map boundaries
                    for col in rect.c0..rect.c1 {
                        let lo = col * m + rect.r0;
                        let hi = col * m + rect.r1;
                        let mut at = lo;
                        while at < hi {
                            let (range_id, mode, target, range_hi) = match program {
                                Some(p) => {
                                    let r = p.map.locate(at);
                                    (r.id, r.mode, r.target, r.hi)
                                }
                                None => (0, MapMode::LocalOnly, None, hi),
                            };
                            let take = hi.min(range_hi) - at;
                            out.push(WriteRec {
                                vaddr: OUT_BASE + at as u64 * eb as u64,
                                bytes: (take * eb) as u32,
                                elements: take as u32,
                                elem_lo: at,
                                wg,
                                wf,
                                range_id,
                                mode,
                                target,
                            });
                            at += take;
                        }
                    }
                }
            }
        }
        out
    }

    fn finish_stage(&mut self, dev: usize) -> Result<(), SimError> {
        let stage = self.gemm[dev].stage;
        if stage == 0 && self.mode == RunMode::FusedMca {
            let depth = self.cfg.system.channel_queue_depth;
            let thresholds = self.cfg.mca.thresholds.clone();
            for ch in &mut self.devices[dev].channels {
                ch.arb.calibrate(depth, &thresholds);
            }
        }
        if stage + 1 < self.gemm[dev].schedule.n_stages {
            self.gemm[dev].stage = stage + 1;
            self.start_stage(dev)
        } else {
            self.gemm[dev].done = true;
            self.stamps.gemm_last = self.stamps.gemm_last.max(self.queue.now());
            // producer kernel boundary: pending communication drains
            for ch in &mut self.devices[dev].channels {
                ch.arb.kernel_boundary();
            }
            for ch in 0..self.cfg.system.n_channels {
                self.pump_channel(dev, ch);
            }
            Ok(())
        }
    }

    // -- fused GEMM-RS --------------------------------------------------------

    fn setup_fused(&mut self) -> Result<(), SimError> {
        self.setup_gemm(true)?;
        let n = self.n();
        let mut dma_reads = Vec::with_capacity(n);
        for dev in 0..n {
            let sched = &self.gemm[dev].schedule;
            let program = match self.cfg.collective.kind {
                CollectiveKind::DirectRs => direct_rs_program(sched, dev, n)?,
                _ => ring_rs_program(sched, dev, n)?,
            };
            for (key, entry) in &program.tracker_program {
                self.devices[dev].tracker.program(*key, *entry);
            }
            dma_reads.push(vec![0u32; program.commands.len()]);
            self.devices[dev].program = Some(program);
        }
        let held = self.devices.iter().map(|d| {
            let n_cmds = d.program.as_ref().map_or(0, |p| p.commands.len());
            vec![None; n_cmds]
        })
        .collect();
        self.fused = Some(FusedPhase { dma_reads_left: dma_reads, held_arrivals: held });
        Ok(())
    }

    /// A tracker trigger readies one DMA block: gather its bytes right away
    /// with communication-stream reads, so the eventual chunk transfer is a
    /// pure link operation. The command fires once every block is ready and
    /// every gather read has been serviced.
    fn on_block_ready(
        &mut self,
        dev: usize,
        cmd_id: u32,
        block_vaddr: u64,
        block_elements: u32,
    ) -> Result<(), SimError> {
        {
            let p = self.devices[dev].program.as_mut().expect("fused program");
            p.commands[cmd_id as usize].block_ready();
        }
        let eb = self.eb() as u64;
        let count = self.enqueue_span(
            dev,
            block_vaddr,
            block_elements as u64 * eb,
            TxnKind::Read,
            Stream::Communication,
            TrafficCat::RsRead,
            Token::DmaRead { dev: dev as u32, cmd: cmd_id },
        )?;
        self.fused.as_mut().expect("fused phase").dma_reads_left[dev][cmd_id as usize] +=
            count as u32;
        let all_ready = {
            let p = self.devices[dev].program.as_ref().expect("fused program");
            let c = &p.commands[cmd_id as usize];
            !c.fired && c.blocks_ready == c.blocks_total
        };
        if all_ready {
            self.fire_dma(dev, cmd_id)?;
        }
        Ok(())
    }

    fn fire_dma(&mut self, dev: usize, cmd_id: u32) -> Result<(), SimError> {
        let (dst, chunk, elem_lo, elem_hi, blocks, op, bytes) = {
            let eb = self.cfg.workload.element_bytes;
            let p = self.devices[dev].program.as_mut().expect("fused program");
            let c = &mut p.commands[cmd_id as usize];
            c.mark_fired();
            (c.dst_device, c.chunk, c.elem_lo, c.elem_hi, c.blocks.clone(), c.op, c.bytes(eb))
        };
        self.trigger_count += 1;
        if std::env::var("FUSESIM_DEBUG_FIRES").is_ok() && dev == 0 {
            eprintln!("t={} dev=0 fire cmd={} chunk={}", self.queue.now(), cmd_id, chunk);
        }
        let payload = if self.functional {
            let eb = self.eb() as u64;
            Some(self.devices[dev].store.read(OUT_BASE + elem_lo as u64 * eb, elem_hi - elem_lo))
        } else {
            None
        };
        let link = self.topo.link_id(dev, dst);
        let at = self.links[link].submit(&self.topo.links[link], self.queue.now(), bytes);
        self.post_msg(
            at,
            LinkMessage {
                dst,
                body: MsgBody::DmaChunk {
                    src: dev,
                    src_cmd: cmd_id,
                    chunk,
                    elem_lo,
                    elem_hi,
                    blocks,
                    op,
                    payload,
                },
            },
        );
        Ok(())
    }

    // -- arrivals --------------------------------------------------------------

    fn on_arrival(&mut self, msg: LinkMessage<T>) -> Result<(), SimError> {
        let dev = msg.dst;
        let eb = self.eb() as u64;
        match msg.body {
            MsgBody::RemoteStore { rec, payload, update } => {
                let range_id = self.devices[dev]
                    .program
                    .as_ref()
                    .map(|p| p.map.locate(rec.elem_lo).id)
                    .unwrap_or(0);
                let chunk = rec.elem_lo / self.gemm[dev].schedule.chunk_elems;
                let kind = if update { TxnKind::NmcUpdate } else { TxnKind::Write };
                let mut txn = MemTransaction::new(
                    OUT_BASE + rec.elem_lo as u64 * eb,
                    rec.bytes,
                    kind,
                    Stream::Communication,
                    TrafficCat::RsWrite,
                );
                txn.meta =
                    Some(WfMeta { wg: rec.wg, wf: rec.wf, range_id, elements: rec.elements });
                txn.payload = payload;
                txn.token = Token::FusedIncoming { dev: dev as u32, chunk: chunk as u32 };
                self.enqueue_txn(dev, txn)?;
            }
            MsgBody::DmaChunk { src, src_cmd, chunk, elem_lo, elem_hi, blocks, op, payload } => {
                if self.fused.as_ref().expect("fused phase").dma_reads_left[src][src_cmd as usize]
                    > 0
                {
                    // the link beat the gather; deliver once the last source
                    // read is serviced
                    let held = self.hold_msg(LinkMessage {
                        dst: dev,
                        body: MsgBody::DmaChunk {
                            src,
                            src_cmd,
                            chunk,
                            elem_lo,
                            elem_hi,
                            blocks,
                            op,
                            payload,
                        },
                    });
                    self.fused.as_mut().unwrap().held_arrivals[src][src_cmd as usize] = Some(held);
                    return Ok(());
                }
                let kind = if op == DmaOp::Update { TxnKind::NmcUpdate } else { TxnKind::Write };
                if let Some(values) = payload {
                    // one contiguous chunk-wide application keeps element
                    // positions exact while timing stays per-block
                    debug_assert_eq!(values.len(), elem_hi - elem_lo);
                    self.devices[dev].store.apply(OUT_BASE + elem_lo as u64 * eb, kind, &values);
                }
                let token = Token::FusedIncoming { dev: dev as u32, chunk: chunk as u32 };
                for b in blocks {
                    let range_id = self.devices[dev]
                        .program
                        .as_ref()
                        .map(|p| p.map.locate(b.elem_lo).id)
                        .unwrap_or(0);
                    let mut txn = MemTransaction::new(
                        OUT_BASE + b.elem_lo as u64 * eb,
                        b.elements * eb as u32,
                        kind,
                        Stream::Communication,
                        TrafficCat::RsWrite,
                    );
                    txn.meta = Some(WfMeta { wg: b.wg, wf: b.wf, range_id, elements: b.elements });
                    txn.token = token;
                    self.enqueue_txn(dev, txn)?;
                }
            }
            MsgBody::CollBlock { step, sblock, elem_off, elems, payload } => {
                let current = self.coll.as_ref().expect("collective phase").devs[dev].step;
                if step == current {
                    self.coll_process_arrival(dev, step, sblock, elem_off, elems, payload)?;
                } else {
                    // the sender is a step ahead; hold until this device
                    // advances
                    debug_assert!(step > current);
                    self.coll.as_mut().unwrap().devs[dev].buffered.push_back(PendingArrival {
                        step,
                        sblock,
                        elem_off,
                        elems,
                        payload,
                    });
                }
            }
        }
        Ok(())
    }

    // -- kernel-executed collectives --------------------------------------------

    fn setup_collective(&mut self, op: CollOp, array_elems: usize, owned: Vec<usize>) {
        let n = self.n();
        let chunk_elems = array_elems / n;
        let eb = self.eb();
        let sblock_elems = (SBLOCK_BYTES / eb).min(chunk_elems).max(1);
        let sblocks = chunk_elems.div_ceil(sblock_elems);
        let devs = (0..n)
            .map(|_| CollDev {
                step: 0,
                out_reads_left: Vec::new(),
                sends_left: 0,
                arrivals_left: 0,
                chain_left: Vec::new(),
                pending_reduced: Vec::new(),
                buffered: VecDeque::new(),
                fold_reads_left: Vec::new(),
                fold_blocks_left: 0,
                fold_writes_left: 0,
                steps_done: false,
                done: false,
            })
            .collect();
        self.coll = Some(CollPhase { op, chunk_elems, sblock_elems, sblocks, devs, owned });
    }

    fn sblock_bounds(&self, chunk: usize, sblock: usize) -> (usize, usize) {
        let coll = self.coll.as_ref().unwrap();
        let lo = chunk * coll.chunk_elems + sblock * coll.sblock_elems;
        let hi = (chunk * coll.chunk_elems + (sblock + 1) * coll.sblock_elems)
            .min((chunk + 1) * coll.chunk_elems);
        (lo, hi)
    }

    fn coll_sent_chunk(&self, dev: usize, step: usize) -> usize {
        let coll = self.coll.as_ref().unwrap();
        match coll.op {
            CollOp::Rs(_) => rs_sent_chunk(dev, step, self.n()),
            CollOp::Ag => ag_sent_chunk(coll.owned[dev], step, self.n()),
        }
    }

    fn coll_start_step(&mut self, dev: usize) -> Result<(), SimError> {
        let n = self.n();
        let (op, sblocks, step) = {
            let coll = self.coll.as_mut().unwrap();
            coll.devs[dev].step += 1;
            (coll.op, coll.sblocks, coll.devs[dev].step)
        };
        debug_assert!(step < n);
        let sent_chunk = self.coll_sent_chunk(dev, step);
        {
            let coll = self.coll.as_mut().unwrap();
            let d = &mut coll.devs[dev];
            d.out_reads_left = vec![0; sblocks];
            d.sends_left = sblocks;
            d.arrivals_left = sblocks;
            d.chain_left = vec![0; sblocks];
            d.pending_reduced = (0..sblocks).map(|_| None).collect();
            if step == n - 1 && matches!(op, CollOp::Rs(RsVariant::SenderReduceFold)) {
                d.fold_reads_left = vec![0; sblocks];
                d.fold_blocks_left = sblocks;
                d.fold_writes_left = 0;
            }
        }
        let eb = self.eb() as u64;
        let cat = match op {
            CollOp::Rs(_) => TrafficCat::RsRead,
            CollOp::Ag => TrafficCat::AgRead,
        };
        for b in 0..sblocks {
            let (lo, hi) = self.sblock_bounds(sent_chunk, b);
            let bytes = (hi - lo) as u64 * eb;
            let token = Token::CollRead { dev: dev as u32, step: step as u32, block: b as u32 };
            let mut count = self.enqueue_span(
                dev,
                OUT_BASE + lo as u64 * eb,
                bytes,
                TxnKind::Read,
                Stream::Communication,
                cat,
                token,
            )?;
            // sender-side reduction also reads the copy received last step
            if matches!(op, CollOp::Rs(RsVariant::SenderReduceFold)) && step > 1 {
                count += self.enqueue_span(
                    dev,
                    RECV_BASE + lo as u64 * eb,
                    bytes,
                    TxnKind::Read,
                    Stream::Communication,
                    TrafficCat::RsRead,
                    token,
                )?;
            }
            self.coll.as_mut().unwrap().devs[dev].out_reads_left[b] = count as u32;
        }
        // release any buffered arrivals for this step
        let mut held = {
            let coll = self.coll.as_mut().unwrap();
            std::mem::take(&mut coll.devs[dev].buffered)
        };
        while let Some(p) = held.pop_front() {
            if p.step == step {
                self.coll_process_arrival(dev, p.step, p.sblock, p.elem_off, p.elems, p.payload)?;
            } else {
                self.coll.as_mut().unwrap().devs[dev].buffered.push_back(p);
            }
        }
        Ok(())
    }

    fn coll_send_block(&mut self, dev: usize, step: usize, sblock: usize) -> Result<(), SimError> {
        let op = self.coll.as_ref().unwrap().op;
        let sent_chunk = self.coll_sent_chunk(dev, step);
        let (lo, hi) = self.sblock_bounds(sent_chunk, sblock);
        let eb = self.eb() as u64;
        let payload = if self.functional {
            let arr = self.devices[dev].store.read(OUT_BASE + lo as u64 * eb, hi - lo);
            let values = match op {
                CollOp::Rs(RsVariant::SenderReduceFold) if step > 1 => {
                    let recv = self.devices[dev].store.read(RECV_BASE + lo as u64 * eb, hi - lo);
                    arr.iter()
                        .zip(&recv)
                        .map(|(&a, &r)| a.accumulate(r).expect("overflow in reduction"))
                        .collect()
                }
                _ => arr,
            };
            Some(values)
        } else {
            None
        };
        let dst = self.topo.predecessor(dev);
        let link = self.topo.link_id(dev, dst);
        let bytes = (hi - lo) as u64 * eb;
        let at = self.links[link].submit(&self.topo.links[link], self.queue.now(), bytes);
        self.post_msg(
            at,
            LinkMessage {
                dst,
                body: MsgBody::CollBlock { step, sblock, elem_off: lo, elems: hi - lo, payload },
            },
        );
        self.coll.as_mut().unwrap().devs[dev].sends_left -= 1;
        Ok(())
    }

    fn coll_process_arrival(
        &mut self,
        dev: usize,
        step: usize,
        sblock: usize,
        elem_off: usize,
        elems: usize,
        payload: Option<Vec<T>>,
    ) -> Result<(), SimError> {
        let op = self.coll.as_ref().unwrap().op;
        let eb = self.eb() as u64;
        let write_token =
            Token::CollWrite { dev: dev as u32, step: step as u32, block: sblock as u32 };
        let count = match op {
            CollOp::Rs(RsVariant::SenderReduceFold) => {
                // the raw partial lands in the receive buffer
                let addr = RECV_BASE + elem_off as u64 * eb;
                if let Some(values) = payload {
                    self.devices[dev].store.apply(addr, TxnKind::Write, &values);
                }
                self.enqueue_span(
                    dev,
                    addr,
                    elems as u64 * eb,
                    TxnKind::Write,
                    Stream::Communication,
                    TrafficCat::RsWrite,
                    write_token,
                )?
            }
            CollOp::Rs(RsVariant::Uniform) => {
                // receiver-side reduction: read the local copy, then write
                // back the partial; the reduced values are computed now and
                // applied when the write enqueues.
                let addr = OUT_BASE + elem_off as u64 * eb;
                let reduced = payload.map(|values| {
                    let local = self.devices[dev].store.read(addr, elems);
                    values
                        .iter()
                        .zip(&local)
                        .map(|(&v, &l)| v.accumulate(l).expect("overflow in reduction"))
                        .collect::<Vec<T>>()
                });
                self.coll.as_mut().unwrap().devs[dev].pending_reduced[sblock] = reduced;
                self.enqueue_span(
                    dev,
                    addr,
                    elems as u64 * eb,
                    TxnKind::Read,
                    Stream::Communication,
                    TrafficCat::RsRead,
                    Token::CollLocalRead {
                        dev: dev as u32,
                        step: step as u32,
                        block: sblock as u32,
                    },
                )?
            }
            CollOp::Rs(RsVariant::Nmc) => {
                let addr = OUT_BASE + elem_off as u64 * eb;
                if let Some(values) = payload {
                    self.devices[dev].store.apply(addr, TxnKind::NmcUpdate, &values);
                }
                self.enqueue_span(
                    dev,
                    addr,
                    elems as u64 * eb,
                    TxnKind::NmcUpdate,
                    Stream::Communication,
                    TrafficCat::RsWrite,
                    write_token,
                )?
            }
            CollOp::Ag => {
                let addr = OUT_BASE + elem_off as u64 * eb;
                if let Some(values) = payload {
                    self.devices[dev].store.apply(addr, TxnKind::Write, &values);
                }
                self.enqueue_span(
                    dev,
                    addr,
                    elems as u64 * eb,
                    TxnKind::Write,
                    Stream::Communication,
                    TrafficCat::AgWrite,
                    write_token,
                )?
            }
        };
        self.coll.as_mut().unwrap().devs[dev].chain_left[sblock] = count as u32;
        Ok(())
    }

    /// Uniform-variant chain: local-copy read serviced; when the sub-block's
    /// reads are done, issue the reduced write-back.
    fn coll_local_read_done(&mut self, dev: usize, step: usize, sblock: usize) -> Result<(), SimError> {
        let n = self.n();
        let chunk = rs_received_chunk(dev, step, n);
        let (lo, hi) = self.sblock_bounds(chunk, sblock);
        let eb = self.eb() as u64;
        let addr = OUT_BASE + lo as u64 * eb;
        let reduced = self.coll.as_mut().unwrap().devs[dev].pending_reduced[sblock].take();
        if let Some(values) = reduced {
            self.devices[dev].store.apply(addr, TxnKind::Write, &values);
        }
        let count = self.enqueue_span(
            dev,
            addr,
            (hi - lo) as u64 * eb,
            TxnKind::Write,
            Stream::Communication,
            TrafficCat::RsWrite,
            Token::CollWrite { dev: dev as u32, step: step as u32, block: sblock as u32 },
        )?;
        self.coll.as_mut().unwrap().devs[dev].chain_left[sblock] = count as u32;
        Ok(())
    }

    /// One sub-block's incoming chain fully serviced.
    fn coll_arrival_done(&mut self, dev: usize, step: usize, sblock: usize) -> Result<(), SimError> {
        let n = self.n();
        let fold = {
            let coll = self.coll.as_mut().unwrap();
            coll.devs[dev].arrivals_left -= 1;
            step == n - 1 && matches!(coll.op, CollOp::Rs(RsVariant::SenderReduceFold))
        };
        if fold {
            // stream the final fold behind the last step's arrivals
            self.coll_start_fold_block(dev, sblock)?;
        }
        self.coll_maybe_advance(dev)
    }

    fn coll_start_fold_block(&mut self, dev: usize, sblock: usize) -> Result<(), SimError> {
        let n = self.n();
        let owned = rs_owned_chunk(dev, n);
        let (lo, hi) = self.sblock_bounds(owned, sblock);
        let eb = self.eb() as u64;
        let bytes = (hi - lo) as u64 * eb;
        let token = Token::FoldRead { dev: dev as u32, block: sblock as u32 };
        let mut count = self.enqueue_span(
            dev,
            RECV_BASE + lo as u64 * eb,
            bytes,
            TxnKind::Read,
            Stream::Communication,
            TrafficCat::RsRead,
            token,
        )?;
        count += self.enqueue_span(
            dev,
            OUT_BASE + lo as u64 * eb,
            bytes,
            TxnKind::Read,
            Stream::Communication,
            TrafficCat::RsRead,
            token,
        )?;
        self.coll.as_mut().unwrap().devs[dev].fold_reads_left[sblock] = count as u32;
        Ok(())
    }

    fn coll_fold_write(&mut self, dev: usize, sblock: usize) -> Result<(), SimError> {
        let n = self.n();
        let owned = rs_owned_chunk(dev, n);
        let (lo, hi) = self.sblock_bounds(owned, sblock);
        let eb = self.eb() as u64;
        let addr = OUT_BASE + lo as u64 * eb;
        if self.functional {
            let local = self.devices[dev].store.read(addr, hi - lo);
            let recv = self.devices[dev].store.read(RECV_BASE + lo as u64 * eb, hi - lo);
            let folded: Vec<T> = local
                .iter()
                .zip(&recv)
                .map(|(&a, &r)| a.accumulate(r).expect("overflow in reduction"))
                .collect();
            self.devices[dev].store.apply(addr, TxnKind::Write, &folded);
        }
        let count = self.enqueue_span(
            dev,
            addr,
            (hi - lo) as u64 * eb,
            TxnKind::Write,
            Stream::Communication,
            TrafficCat::RsWrite,
            Token::FoldWrite { dev: dev as u32 },
        )?;
        let d = &mut self.coll.as_mut().unwrap().devs[dev];
        d.fold_blocks_left -= 1;
        d.fold_writes_left += count as usize;
        Ok(())
    }

    /// A device advances to the next step once its sends are all submitted
    /// and every arrival of the current step has been serviced.
    fn coll_maybe_advance(&mut self, dev: usize) -> Result<(), SimError> {
        let n = self.n();
        let (ready, step, op) = {
            let c = self.coll.as_ref().unwrap();
            let d = &c.devs[dev];
            (
                !d.steps_done && d.step >= 1 && d.sends_left == 0 && d.arrivals_left == 0,
                d.step,
                c.op,
            )
        };
        if !ready {
            return Ok(());
        }
        if step < n - 1 {
            return self.coll_start_step(dev);
        }
        let c = self.coll.as_mut().unwrap();
        c.devs[dev].steps_done = true;
        match op {
            CollOp::Rs(RsVariant::SenderReduceFold) => {
                if c.devs[dev].fold_blocks_left == 0 && c.devs[dev].fold_writes_left == 0 {
                    c.devs[dev].done = true;
                }
            }
            _ => c.devs[dev].done = true,
        }
        Ok(())
    }

    // -- service-completion dispatch ----------------------------------------------

    fn on_serviced(&mut self, txn: &MemTransaction<T>) -> Result<(), SimError> {
        match txn.token {
            Token::None => Ok(()),
            Token::StageRead { dev, .. } => {
                let d = dev as usize;
                self.gemm[d].pending_reads -= 1;
                if self.gemm[d].pending_reads == 0 && self.gemm[d].waves_left == 0 {
                    self.maybe_start_writes(d)?;
                }
                Ok(())
            }
            Token::StageWrite { dev, .. } => {
                let d = dev as usize;
                self.gemm[d].pending_writes -= 1;
                if self.gemm[d].pending_writes == 0 && self.gemm[d].writes_emitted {
                    self.finish_stage(d)?;
                }
                Ok(())
            }
            Token::CollRead { dev, step, block } => {
                let d = dev as usize;
                let left = {
                    let c = self.coll.as_mut().unwrap();
                    let slot = &mut c.devs[d].out_reads_left[block as usize];
                    *slot -= 1;
                    *slot
                };
                if left == 0 {
                    self.coll_send_block(d, step as usize, block as usize)?;
                    self.coll_maybe_advance(d)?;
                }
                Ok(())
            }
            Token::CollLocalRead { dev, step, block } => {
                let d = dev as usize;
                let left = {
                    let c = self.coll.as_mut().unwrap();
                    let slot = &mut c.devs[d].chain_left[block as usize];
                    *slot -= 1;
                    *slot
                };
                if left == 0 {
                    self.coll_local_read_done(d, step as usize, block as usize)?;
                }
                Ok(())
            }
            Token::CollWrite { dev, step, block } => {
                let d = dev as usize;
                let left = {
                    let c = self.coll.as_mut().unwrap();
                    let slot = &mut c.devs[d].chain_left[block as usize];
                    *slot -= 1;
                    *slot
                };
                if left == 0 {
                    self.coll_arrival_done(d, step as usize, block as usize)?;
                }
                Ok(())
            }
            Token::FoldRead { dev, block } => {
                let d = dev as usize;
                let left = {
                    let c = self.coll.as_mut().unwrap();
                    let slot = &mut c.devs[d].fold_reads_left[block as usize];
                    *slot -= 1;
                    *slot
                };
                if left == 0 {
                    self.coll_fold_write(d, block as usize)?;
                }
                Ok(())
            }
            Token::FoldWrite { dev } => {
                let d = dev as usize;
                let c = self.coll.as_mut().unwrap();
                c.devs[d].fold_writes_left -= 1;
                if c.devs[d].fold_writes_left == 0
                    && c.devs[d].fold_blocks_left == 0
                    && c.devs[d].steps_done
                {
                    c.devs[d].done = true;
                }
                Ok(())
            }
            Token::DmaRead { dev, cmd } => {
                let d = dev as usize;
                let release = {
                    let f = self.fused.as_mut().expect("fused phase");
                    f.dma_reads_left[d][cmd as usize] -= 1;
                    if f.dma_reads_left[d][cmd as usize] == 0 {
                        f.held_arrivals[d][cmd as usize].take()
                    } else {
                        None
                    }
                };
                if let Some(held) = release {
                    let m = self.msgs[held].take().expect("held message");
                    self.free_msgs.push(held);
                    self.on_arrival(m)?;
                }
                Ok(())
            }
            Token::FusedIncoming { .. } => Ok(()),
        }
    }

    // -- phase drivers -------------------------------------------------------------

    fn kernel_start_all(&mut self) {
        for dev in 0..self.n() {
            for ch in &mut self.devices[dev].channels {
                ch.arb.kernel_start();
            }
        }
    }

    fn run_gemm_phase(&mut self) -> Result<Ns, SimError> {
        let start = self.queue.now();
        self.stamps.phase_start = start;
        self.kernel_start_all();
        self.start_all_stages()?;
        let end = self.run_until_idle()?;
        if self.gemm.iter().any(|g| !g.done) {
            return Err(SimError::Invariant("GEMM phase idled before completion".into()));
        }
        Ok(end - start)
    }

    fn run_coll_phase(
        &mut self,
        op: CollOp,
        array_elems: usize,
        owned: Vec<usize>,
    ) -> Result<Ns, SimError> {
        let start = self.queue.now();
        self.setup_collective(op, array_elems, owned);
        self.kernel_start_all();
        for dev in 0..self.n() {
            self.coll_start_step(dev)?;
        }
        let end = self.run_until_idle()?;
        let coll = self.coll.take().expect("collective phase state");
        if coll.devs.iter().any(|d| !d.done) {
            return Err(SimError::Invariant("collective phase idled before completion".into()));
        }
        if matches!(op, CollOp::Rs(v) if v != RsVariant::Nmc) {
            self.cu_reduction_ns += end - start;
        }
        Ok(end - start)
    }

    fn run_fused_phase(&mut self) -> Result<Ns, SimError> {
        let start = self.queue.now();
        self.stamps.phase_start = start;
        self.kernel_start_all();
        self.start_all_stages()?;
        let end = self.run_until_idle()?;
        for dev in 0..self.n() {
            self.devices[dev].tracker.assert_drained()?;
            if let Some(p) = &self.devices[dev].program {
                if let Some(unfired) = p.commands.iter().find(|c| !c.fired) {
                    return Err(SimError::Invariant(format!(
                        "device {dev} DMA command for chunk {} never fired ({}/{} blocks ready)",
                        unfired.chunk, unfired.blocks_ready, unfired.blocks_total
                    )));
                }
            }
        }
        self.fused = None;
        Ok(end - start)
    }

    // -- reporting ------------------------------------------------------------------

    fn extract_owned_chunks(&mut self, owned: &[usize], chunk_elems: usize) -> Vec<(usize, Vec<T>)> {
        let eb = self.eb() as u64;
        (0..self.n())
            .map(|dev| {
                let c = owned[dev];
                let lo = c * chunk_elems;
                (c, self.devices[dev].store.read(OUT_BASE + lo as u64 * eb, chunk_elems))
            })
            .collect()
    }

    fn extract_full_arrays(&mut self, elems: usize) -> Vec<Vec<T>> {
        (0..self.n()).map(|dev| self.devices[dev].store.read(OUT_BASE, elems)).collect()
    }

    /// Mean queueing delay of compute-stream reads (arrival to DRAM-queue
    /// issue), across all channels of all devices.
    pub fn mean_compute_read_wait_ns(&self) -> f64 {
        let (mut wait, mut count) = (0u64, 0u64);
        for d in &self.devices {
            for ch in &d.channels {
                wait += ch.stats.compute_read_wait_ns;
                count += ch.stats.compute_read_count;
            }
        }
        if count == 0 {
            0.0
        } else {
            wait as f64 / count as f64
        }
    }

    /// Total starvation-policy violations recorded by the arbiters.
    pub fn starvation_violations(&self) -> u64 {
        self.devices
            .iter()
            .flat_map(|d| d.channels.iter())
            .map(|c| c.arb.starvation_violations)
            .sum()
    }

    fn build_report(&mut self, spans: PhaseSpans, label: String) -> SimReport {
        let mut dram = DramBytes::default();
        let mut emitted = 0;
        let mut llc_hit = 0;
        let mut llc_miss = 0;
        let mut peak_ways = 0;
        for d in &self.devices {
            dram.add(&d.counters.dram);
            emitted += d.counters.emitted_gemm_write_bytes;
            llc_hit += d.llc.hit_bytes;
            llc_miss += d.llc.miss_bytes;
            peak_ways = peak_ways.max(d.tracker.peak_ways);
        }
        let link_traffic: Vec<LinkTraffic> = self
            .topo
            .links
            .iter()
            .zip(&self.links)
            .filter(|(_, s)| s.bytes > 0)
            .map(|(l, s)| LinkTraffic { src: l.src, dst: l.dst, bytes: s.bytes, messages: s.messages })
            .collect();
        SimReport {
            schema_version: SCHEMA_VERSION,
            mode: self.mode,
            workload: label,
            fingerprint: self.cfg.fingerprint(self.mode),
            workload_fingerprint: self.cfg.workload_fingerprint(),
            runtime: RuntimeBreakdown {
                gemm_ns: spans.gemm,
                rs_ns: spans.rs,
                ag_ns: spans.ag,
                overlap_ns: spans.overlap,
                total_ns: spans.total,
            },
            dram,
            dram_total: dram.total(),
            link_traffic,
            trigger_count: self.trigger_count,
            gemm_emitted_write_bytes: emitted,
            cu_reduction_ns: self.cu_reduction_ns,
            llc_hit_bytes: llc_hit,
            llc_miss_bytes: llc_miss,
            tracker_size_bytes: self.devices[0].tracker.size_bytes(),
            tracker_peak_ways: peak_ways,
            starvation_violations: self.starvation_violations(),
            mean_compute_read_wait_ns: self.mean_compute_read_wait_ns(),
            peak_channel_occupancy: self
                .devices
                .iter()
                .flat_map(|d| d.channels.iter())
                .map(|c| c.stats.peak_occupancy)
                .max()
                .unwrap_or(0),
            config: self.cfg.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Mode dispatch
// ---------------------------------------------------------------------------

/// Closed-form total for the composable modes, from isolated kernel times.
/// `sequential` sums the three kernels; the ideal modes overlap GEMM with RS
/// perfectly and append AG. The fused modes are not composable (their total
/// comes out of the event simulation) and return `None`.
pub fn composed_mode_total(mode: RunMode, gemm_ns: u64, rs_ns: u64, ag_ns: u64) -> Option<u64> {
    match mode {
        RunMode::Sequential => Some(gemm_ns + rs_ns + ag_ns),
        RunMode::IdealOverlap | RunMode::IdealOverlapNmc => Some(gemm_ns.max(rs_ns) + ag_ns),
        RunMode::Fused | RunMode::FusedMca => None,
    }
}

fn baseline_rs_variant(cfg: &SimConfig) -> RsVariant {
    if cfg.collective.final_step_fold {
        RsVariant::SenderReduceFold
    } else {
        RsVariant::Uniform
    }
}

fn workload_label(cfg: &SimConfig) -> String {
    let w = &cfg.workload;
    if w.is_explicit() {
        format!("gemm-{}x{}x{}", w.m, w.n, w.k)
    } else if w.is_custom_model() {
        format!("custom-h{}/tp{}/{}", w.hidden, w.tp, w.sublayer)
    } else {
        format!("{}/tp{}/{}", w.model, w.tp, w.sublayer)
    }
}

fn random_ints<T: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: i64 = rng.gen_range(-4..=4);
            let mut out = T::zero();
            if v >= 0 {
                for _ in 0..v {
                    out = out.accumulate(T::one()).unwrap();
                }
            } else {
                for _ in 0..(-v) {
                    out -= T::one();
                }
            }
            out
        })
        .collect()
}

/// Run one mode end to end, returning the report plus optional functional
/// results and event trace.
pub fn run_full<T: Scalar>(mode: RunMode, cfg: &SimConfig) -> Result<RunArtifacts<T>, SimError> {
    match mode {
        RunMode::Sequential => run_sequential::<T>(cfg),
        RunMode::Fused | RunMode::FusedMca => run_fused::<T>(mode, cfg),
        RunMode::IdealOverlap | RunMode::IdealOverlapNmc => {
            if !matches!(cfg.collective.kind, CollectiveKind::RingAr | CollectiveKind::RingRs) {
                return Err(ConfigError::invalid(
                    "collective.kind",
                    "ideal modes are defined for ring_rs / ring_ar",
                )
                .into());
            }
            run_ideal::<T>(mode, cfg)
        }
    }
}

pub fn run_mode<T: Scalar>(mode: RunMode, cfg: &SimConfig) -> Result<SimReport, SimError> {
    run_full::<T>(mode, cfg).map(|a| a.report)
}

fn run_sequential<T: Scalar>(cfg: &SimConfig) -> Result<RunArtifacts<T>, SimError> {
    let kind = cfg.collective.kind;
    if kind == CollectiveKind::DirectRs {
        return Err(ConfigError::invalid(
            "collective.kind",
            "direct_rs is a store-driven configuration; run it in mode fused or fused-mca",
        )
        .into());
    }
    let mut sim: Simulator<T> = Simulator::new(cfg, RunMode::Sequential)?;
    sim.setup_gemm(false)?;
    let elems = sim.gemm[0].schedule.shape.output_elems();
    let n = sim.n();
    let g = sim.run_gemm_phase()?;
    let variant = baseline_rs_variant(cfg);
    let (mut r, mut a) = (0, 0);
    let rs_owned: Vec<usize> = (0..n).map(|d| rs_owned_chunk(d, n)).collect();
    let mut owned_after: Vec<usize> = (0..n).collect();
    match kind {
        CollectiveKind::RingRs => {
            r = sim.run_coll_phase(CollOp::Rs(variant), elems, rs_owned.clone())?;
            owned_after = rs_owned;
        }
        CollectiveKind::RingAr => {
            r = sim.run_coll_phase(CollOp::Rs(variant), elems, rs_owned.clone())?;
            a = sim.run_coll_phase(CollOp::Ag, elems, rs_owned.clone())?;
            owned_after = rs_owned;
        }
        CollectiveKind::RingAg => {
            a = sim.run_coll_phase(CollOp::Ag, elems, (0..n).collect())?;
        }
        CollectiveKind::DirectRs => unreachable!(),
    }
    let total = composed_mode_total(RunMode::Sequential, g, r, a).expect("composable");
    let functional = if cfg.sim.functional {
        let producer_outputs: Vec<Vec<T>> =
            sim.gemm.iter().map(|g| g.values.clone().expect("functional values")).collect();
        let owned_chunks = sim.extract_owned_chunks(&owned_after, elems / n);
        let gathered = matches!(kind, CollectiveKind::RingAr | CollectiveKind::RingAg)
            .then(|| sim.extract_full_arrays(elems));
        Some(FunctionalResult { producer_outputs, owned_chunks, gathered })
    } else {
        None
    };
    let spans = PhaseSpans { gemm: g, rs: r, ag: a, overlap: 0, total };
    let label = workload_label(cfg);
    let report = sim.build_report(spans, label);
    let trace = sim.queue.take_trace();
    Ok(RunArtifacts { report, functional, trace })
}

fn run_fused<T: Scalar>(mode: RunMode, cfg: &SimConfig) -> Result<RunArtifacts<T>, SimError> {
    let kind = cfg.collective.kind;
    if kind == CollectiveKind::RingAg {
        return Err(ConfigError::invalid(
            "collective.kind",
            "fused modes support ring_rs, ring_ar, direct_rs (the all-gather stays kernel-executed)",
        )
        .into());
    }
    let mut sim: Simulator<T> = Simulator::new(cfg, mode)?;
    sim.setup_fused()?;
    let elems = sim.gemm[0].schedule.shape.output_elems();
    let n = sim.n();
    let fused_span = sim.run_fused_phase()?;
    let gemm_span = sim.stamps.gemm_last - sim.stamps.phase_start;
    let owned: Vec<usize> = match kind {
        CollectiveKind::DirectRs => (0..n).collect(),
        _ => (0..n).map(|d| rs_owned_chunk(d, n)).collect(),
    };
    let mut a = 0;
    if kind == CollectiveKind::RingAr {
        a = sim.run_coll_phase(CollOp::Ag, elems, owned.clone())?;
    }
    let total = fused_span + a;
    let functional = if cfg.sim.functional {
        let producer_outputs: Vec<Vec<T>> =
            sim.gemm.iter().map(|g| g.values.clone().expect("functional values")).collect();
        let owned_chunks = sim.extract_owned_chunks(&owned, elems / n);
        let gathered = (kind == CollectiveKind::RingAr).then(|| sim.extract_full_arrays(elems));
        Some(FunctionalResult { producer_outputs, owned_chunks, gathered })
    } else {
        None
    };
    let spans =
        PhaseSpans { gemm: gemm_span, rs: fused_span, ag: a, overlap: fused_span, total };
    let label = workload_label(cfg);
    let report = sim.build_report(spans, label);
    let trace = sim.queue.take_trace();
    Ok(RunArtifacts { report, functional, trace })
}

fn run_ideal<T: Scalar>(mode: RunMode, cfg: &SimConfig) -> Result<RunArtifacts<T>, SimError> {
    let mut iso = cfg.clone();
    iso.sim.functional = false;

    // isolated GEMM
    let mut gsim: Simulator<T> = Simulator::new(&iso, mode)?;
    gsim.setup_gemm(false)?;
    let elems = gsim.gemm[0].schedule.shape.output_elems();
    let n = gsim.n();
    let g = gsim.run_gemm_phase()?;

    // isolated RS: baseline kernels, or the near-memory variant
    let variant = match mode {
        RunMode::IdealOverlapNmc => RsVariant::Nmc,
        _ => baseline_rs_variant(cfg),
    };
    let owned: Vec<usize> = (0..n).map(|d| rs_owned_chunk(d, n)).collect();
    let mut rsim: Simulator<T> = Simulator::new(&iso, mode)?;
    let r = rsim.run_coll_phase(CollOp::Rs(variant), elems, owned.clone())?;

    // isolated AG
    let mut asim: Simulator<T> = Simulator::new(&iso, mode)?;
    let a = if cfg.collective.kind == CollectiveKind::RingAr {
        asim.run_coll_phase(CollOp::Ag, elems, owned)?
    } else {
        0
    };

    let overlap = g.max(r);
    let total = composed_mode_total(mode, g, r, a).expect("composable");
    let spans = PhaseSpans { gemm: g, rs: r, ag: a, overlap, total };
    let label = workload_label(cfg);
    let mut report = gsim.build_report(spans, label);
    let zero = || PhaseSpans { gemm: 0, rs: 0, ag: 0, overlap: 0, total: 0 };
    let r_report = rsim.build_report(zero(), String::new());
    let a_report = asim.build_report(zero(), String::new());
    report.dram.add(&r_report.dram);
    report.dram.add(&a_report.dram);
    report.dram_total = report.dram.total();
    report.cu_reduction_ns = r_report.cu_reduction_ns;
    let mut links = report.link_traffic.clone();
    for extra in [&r_report.link_traffic, &a_report.link_traffic] {
        for lt in extra {
            match links.iter_mut().find(|l| l.src == lt.src && l.dst == lt.dst) {
                Some(l) => {
                    l.bytes += lt.bytes;
                    l.messages += lt.messages;
                }
                None => links.push(*lt),
            }
        }
    }
    links.sort_by_key(|l| (l.src, l.dst));
    report.link_traffic = links;
    // the combined fingerprint covers the ideal mode itself
    report.fingerprint = cfg.fingerprint(mode);
    Ok(RunArtifacts { report, functional: None, trace: None })
}

/// Standalone kernel-executed collective over `array_bytes` (no producer):
/// the isolated-RS/AG building block and the link-model validation target.
pub fn run_collective_only<T: Scalar>(
    cfg: &SimConfig,
    op_kind: CollectiveKind,
    array_bytes: u64,
    inputs: Option<Vec<Vec<T>>>,
) -> Result<(SimReport, Option<FunctionalResult<T>>), SimError> {
    let mut cfg = cfg.clone();
    cfg.workload.model = String::new();
    cfg.workload.m = 1;
    cfg.workload.n = 1;
    cfg.workload.k = 1;
    let eb = cfg.workload.element_bytes;
    let elems = (array_bytes as usize) / eb;
    let n = cfg.system.n_gpus;
    if !elems.is_multiple_of(n) {
        return Err(
            ConfigError::invalid("collective", "array must divide into n_gpus chunks").into()
        );
    }
    cfg.sim.functional = inputs.is_some();
    let mut sim: Simulator<T> = Simulator::new(&cfg, RunMode::Sequential)?;
    if let Some(values) = &inputs {
        for dev in 0..n {
            sim.devices[dev].store.alloc(OUT_BASE, elems, eb);
            sim.devices[dev].store.alloc(RECV_BASE, elems, eb);
            sim.devices[dev].store.fill(OUT_BASE, &values[dev]);
        }
    }
    let variant = baseline_rs_variant(&cfg);
    let rs_owned: Vec<usize> = (0..n).map(|d| rs_owned_chunk(d, n)).collect();
    let (mut r, mut a) = (0, 0);
    match op_kind {
        CollectiveKind::RingRs => {
            r = sim.run_coll_phase(CollOp::Rs(variant), elems, rs_owned.clone())?;
        }
        CollectiveKind::RingAg => {
            a = sim.run_coll_phase(CollOp::Ag, elems, (0..n).collect())?;
        }
        CollectiveKind::RingAr => {
            r = sim.run_coll_phase(CollOp::Rs(variant), elems, rs_owned.clone())?;
            a = sim.run_coll_phase(CollOp::Ag, elems, rs_owned.clone())?;
        }
        CollectiveKind::DirectRs => {
            return Err(ConfigError::invalid(
                "collective",
                "direct_rs needs a producer (fused mode)",
            )
            .into())
        }
    }
    let owned_after: Vec<usize> =
        if op_kind == CollectiveKind::RingAg { (0..n).collect() } else { rs_owned };
    let functional = inputs.map(|values| {
        let owned_chunks = sim.extract_owned_chunks(&owned_after, elems / n);
        let gathered = matches!(op_kind, CollectiveKind::RingAr | CollectiveKind::RingAg)
            .then(|| sim.extract_full_arrays(elems));
        FunctionalResult { producer_outputs: values, owned_chunks, gathered }
    });
    let spans = PhaseSpans { gemm: 0, rs: r, ag: a, overlap: 0, total: r + a };
    let label = format!("{}-{}B", op_kind.as_str(), array_bytes);
    let report = sim.build_report(spans, label);
    Ok((report, functional))
}

/// Near-memory RS variant in isolation (for the ideal-NMC comparisons).
pub fn run_rs_nmc_only<T: Scalar>(cfg: &SimConfig, array_bytes: u64) -> Result<SimReport, SimError> {
    let mut cfg = cfg.clone();
    cfg.workload.model = String::new();
    cfg.workload.m = 1;
    cfg.workload.n = 1;
    cfg.workload.k = 1;
    cfg.sim.functional = false;
    let eb = cfg.workload.element_bytes;
    let elems = (array_bytes as usize) / eb;
    let n = cfg.system.n_gpus;
    let mut sim: Simulator<T> = Simulator::new(&cfg, RunMode::Sequential)?;
    let owned: Vec<usize> = (0..n).map(|d| rs_owned_chunk(d, n)).collect();
    let r = sim.run_coll_phase(CollOp::Rs(RsVariant::Nmc), elems, owned)?;
    let spans = PhaseSpans { gemm: 0, rs: r, ag: 0, overlap: 0, total: r };
    let label = format!("rs-nmc-{array_bytes}B");
    Ok(sim.build_report(spans, label))
}
