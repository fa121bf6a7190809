//! Pre-programmed DMA command tables and output address-space configuration.
//!
//! `remote_map` turns a producer's stores to a range into fine-grained link
//! messages that arrive at the target device as near-memory updates;
//! `dma_map` queues an inactive per-chunk DMA command whose blocks (one per
//! WF region intersecting the range) are marked ready by tracker triggers.
//! When every block is ready the command fires once: the engine gathers the
//! chunk with communication-stream reads and emits one link transfer whose
//! arrival spawns remote update transactions carrying the originating
//! wg/wf identities for the destination tracker.

use std::collections::HashMap;

use crate::config::ConfigError;
use crate::gemm::StageSchedule;
use crate::tracker::{ProgramEntry, WfKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    /// Written once locally, never communicated (the device's final chunk).
    LocalOnly,
    /// Producer stores stream straight to the target device (plain store).
    RemoteStore,
    /// Producer stores stream straight to the target device as NMC updates.
    RemoteUpdate,
    /// Tracker-triggered DMA copies the range to the target (plain store).
    DmaStore,
    /// Tracker-triggered DMA updates the target near memory.
    DmaUpdate,
}

impl MapMode {
    pub fn is_remote(&self) -> bool {
        matches!(self, MapMode::RemoteStore | MapMode::RemoteUpdate)
    }

    pub fn is_dma(&self) -> bool {
        matches!(self, MapMode::DmaStore | MapMode::DmaUpdate)
    }

    pub fn is_update(&self) -> bool {
        matches!(self, MapMode::RemoteUpdate | MapMode::DmaUpdate)
    }
}

/// One producer-output range (element indices, half-open) and its mapping.
#[derive(Debug, Clone)]
pub struct MapRange {
    pub id: u16,
    pub lo: usize,
    pub hi: usize,
    pub mode: MapMode,
    pub target: Option<usize>,
    pub updates_per_element: u32,
}

/// Disjoint ranges covering the producer output exactly.
#[derive(Debug, Clone, Default)]
pub struct AddressMap {
    pub ranges: Vec<MapRange>,
    total_elems: usize,
}

impl AddressMap {
    pub fn new(total_elems: usize) -> AddressMap {
        AddressMap { ranges: Vec::new(), total_elems }
    }

    fn push(&mut self, mut range: MapRange) -> Result<u16, ConfigError> {
        if range.hi > self.total_elems || range.lo >= range.hi {
            return Err(ConfigError::invalid("collective", "map range outside producer output"));
        }
        if self.ranges.iter().any(|r| range.lo < r.hi && r.lo < range.hi) {
            return Err(ConfigError::invalid("collective", "overlapping address-map ranges"));
        }
        range.id = self.ranges.len() as u16;
        let id = range.id;
        self.ranges.push(range);
        Ok(id)
    }

    /// Map a range for fine-grained remote writes/updates on producer stores.
    pub fn remote_map(
        &mut self,
        lo: usize,
        hi: usize,
        device: usize,
        self_device: usize,
        update: bool,
    ) -> Result<u16, ConfigError> {
        if device == self_device {
            return Err(ConfigError::invalid("collective", "remote_map to self"));
        }
        self.push(MapRange {
            id: 0,
            lo,
            hi,
            mode: if update { MapMode::RemoteUpdate } else { MapMode::RemoteStore },
            target: Some(device),
            updates_per_element: 1,
        })
    }

    /// Map a range for a triggered DMA store/update of `updates_per_element`.
    pub fn dma_map(
        &mut self,
        lo: usize,
        hi: usize,
        device: usize,
        update: bool,
        updates_per_element: u32,
    ) -> Result<u16, ConfigError> {
        if updates_per_element < 1 {
            return Err(ConfigError::invalid("collective", "updates_per_element must be >= 1"));
        }
        self.push(MapRange {
            id: 0,
            lo,
            hi,
            mode: if update { MapMode::DmaUpdate } else { MapMode::DmaStore },
            target: Some(device),
            updates_per_element,
        })
    }

    pub fn local_only(&mut self, lo: usize, hi: usize, updates: u32) -> Result<u16, ConfigError> {
        self.push(MapRange {
            id: 0,
            lo,
            hi,
            mode: MapMode::LocalOnly,
            target: None,
            updates_per_element: updates,
        })
    }

    /// Every byte of the producer output must be mapped exactly once.
    pub fn validate_cover(&self) -> Result<(), ConfigError> {
        let mut spans: Vec<(usize, usize)> = self.ranges.iter().map(|r| (r.lo, r.hi)).collect();
        spans.sort_unstable();
        let mut at = 0;
        for (lo, hi) in spans {
            if lo != at {
                return Err(ConfigError::invalid(
                    "collective",
                    format!("address map gap at element {at}"),
                ));
            }
            at = hi;
        }
        if at != self.total_elems {
            return Err(ConfigError::invalid("collective", "address map does not cover output"));
        }
        Ok(())
    }

    /// Range containing an element index. Ranges are few; linear scan.
    pub fn locate(&self, elem: usize) -> &MapRange {
        self.ranges
            .iter()
            .find(|r| r.lo <= elem && elem < r.hi)
            .unwrap_or_else(|| panic!("element {elem} not covered by address map"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmaOp {
    Store,
    Update,
}

/// One WF region inside a DMA command's range; the unit the tracker readies
/// and the unit of remote update generation at the destination.
#[derive(Debug, Clone, Copy)]
pub struct BlockRec {
    pub wg: u32,
    pub wf: u8,
    /// First element (output-array index) of this block's in-range span.
    pub elem_lo: usize,
    pub elements: u32,
}

/// Pre-programmed transfer of one chunk to a neighbor, fired by the tracker.
#[derive(Debug, Clone)]
pub struct DmaCommand {
    pub id: u32,
    pub range_id: u16,
    /// Collective chunk this command ships.
    pub chunk: usize,
    pub dst_device: usize,
    pub op: DmaOp,
    pub elem_lo: usize,
    pub elem_hi: usize,
    pub blocks_total: u32,
    pub blocks_ready: u32,
    pub fired: bool,
    pub blocks: Vec<BlockRec>,
}

impl DmaCommand {
    pub fn bytes(&self, element_bytes: usize) -> u64 {
        ((self.elem_hi - self.elem_lo) * element_bytes) as u64
    }

    /// A tracker trigger readies one block; true once all blocks are ready.
    pub fn block_ready(&mut self) -> bool {
        assert!(!self.fired, "DMA block readied after command fired");
        self.blocks_ready += 1;
        assert!(self.blocks_ready <= self.blocks_total, "more block triggers than blocks");
        self.blocks_ready == self.blocks_total
    }

    pub fn mark_fired(&mut self) {
        assert!(!self.fired, "double-fired DMA command");
        assert_eq!(self.blocks_ready, self.blocks_total, "fired before all blocks ready");
        self.fired = true;
    }
}

/// Address map, command table, and tracker thresholds for one device's fused
/// collective; built from `remote_map`/`dma_map` configuration.
#[derive(Debug, Clone, Default)]
pub struct FusedProgram {
    pub map: AddressMap,
    pub commands: Vec<DmaCommand>,
    pub tracker_program: Vec<(WfKey, ProgramEntry)>,
    /// Expected update transactions per local-only (final) chunk, used for
    /// completion accounting: (range_id, expected updates per element).
    pub final_range: Option<(u16, u32)>,
}

/// Per-WF intersection of the clipped tile with one map range.
pub fn wf_range_segments(
    schedule: &StageSchedule,
    map: &AddressMap,
    wg: u32,
    wf: u8,
) -> Vec<(u16, usize, u32)> {
    let rect = schedule.wf_rect(wg, wf);
    if rect.is_empty() {
        return Vec::new();
    }
    let m = schedule.shape.m;
    let mut out: Vec<(u16, usize, u32)> = Vec::new();
    for col in rect.c0..rect.c1 {
        let lo = col * m + rect.r0;
        let hi = col * m + rect.r1;
        let mut at = lo;
        while at < hi {
            let range = map.locate(at);
            let take = hi.min(range.hi) - at;
            match out.iter_mut().find(|(id, _, _)| *id == range.id) {
                Some((_, min_elem, count)) => {
                    *min_elem = (*min_elem).min(at);
                    *count += take as u32;
                }
                None => out.push((range.id, at, take as u32)),
            }
            at += take;
        }
    }
    out
}

/// Ring reduce-scatter program for one device: first chunk remote-updated to
/// the predecessor, steady-state chunks dma-updated (two expected updates per
/// element: one local, one incoming), last chunk local-only.
pub fn ring_rs_program(
    schedule: &StageSchedule,
    device: usize,
    n_devices: usize,
) -> Result<FusedProgram, ConfigError> {
    let n_chunks = schedule.n_chunks;
    assert_eq!(n_chunks, n_devices);
    let chunk_elems = schedule.chunk_elems;
    let pred = (device + n_devices - 1) % n_devices;
    let mut map = AddressMap::new(schedule.shape.output_elems());

    let chunk_at = |pos: usize| (device + pos) % n_chunks;
    let bounds = |c: usize| (c * chunk_elems, (c + 1) * chunk_elems);

    // position 0 -> remote, positions 1..N-2 -> dma, position N-1 -> local.
    let first = chunk_at(0);
    let (lo, hi) = bounds(first);
    map.remote_map(lo, hi, pred, device, true)?;
    let mut dma_ranges = Vec::new();
    for pos in 1..n_devices.saturating_sub(1) {
        let c = chunk_at(pos);
        let (lo, hi) = bounds(c);
        let id = map.dma_map(lo, hi, pred, true, 2)?;
        dma_ranges.push((id, c, lo, hi));
    }
    let mut final_range = None;
    if n_devices >= 2 {
        let c = chunk_at(n_devices - 1);
        let (lo, hi) = bounds(c);
        let id = map.local_only(lo, hi, 2)?;
        final_range = Some((id, 2));
    }
    map.validate_cover()?;

    let (commands, tracker_program) = build_commands(schedule, &map, &dma_ranges, pred, DmaOp::Update, 2);
    Ok(FusedProgram { map, commands, tracker_program, final_range })
}

/// Ring all-gather program: the device's own chunk is produced locally
/// (single update) and then dma-stored around the ring; forwarding happens at
/// each hop until the chunk has visited every device. No reductions.
pub fn ring_ag_program(
    schedule: &StageSchedule,
    device: usize,
    n_devices: usize,
) -> Result<FusedProgram, ConfigError> {
    let chunk_elems = schedule.chunk_elems;
    let pred = (device + n_devices - 1) % n_devices;
    let mut map = AddressMap::new(schedule.shape.output_elems());
    // The producer writes only its own chunk; other chunks arrive by DMA and
    // are forwarded. Chunk c makes N-1 hops from device c toward the
    // predecessor side, so the chunk that arrives at d and stays is d-1.
    let mut dma_ranges = Vec::new();
    for c in 0..n_devices {
        let (lo, hi) = (c * chunk_elems, (c + 1) * chunk_elems);
        if c == (device + n_devices - 1) % n_devices {
            map.local_only(lo, hi, 1)?;
        } else {
            let id = map.dma_map(lo, hi, pred, false, 1)?;
            dma_ranges.push((id, c, lo, hi));
        }
    }
    map.validate_cover()?;
    let (commands, tracker_program) = build_commands(schedule, &map, &dma_ranges, pred, DmaOp::Store, 1);
    let final_range = map
        .ranges
        .iter()
        .find(|r| r.mode == MapMode::LocalOnly)
        .map(|r| (r.id, 1));
    Ok(FusedProgram { map, commands, tracker_program, final_range })
}

/// Direct reduce-scatter over a fully-connected topology: every stage output
/// is sliced N ways and each slice remote-updated straight to its final
/// owner. No tracker or DMA involvement; the collective is carried entirely
/// by producer stores.
pub fn direct_rs_program(
    schedule: &StageSchedule,
    device: usize,
    n_devices: usize,
) -> Result<FusedProgram, ConfigError> {
    let chunk_elems = schedule.chunk_elems;
    let mut map = AddressMap::new(schedule.shape.output_elems());
    let mut final_range = None;
    for c in 0..n_devices {
        let (lo, hi) = (c * chunk_elems, (c + 1) * chunk_elems);
        if c == device {
            let id = map.local_only(lo, hi, n_devices as u32)?;
            final_range = Some((id, n_devices as u32));
        } else {
            map.remote_map(lo, hi, c, device, true)?;
        }
    }
    map.validate_cover()?;
    Ok(FusedProgram { map, commands: Vec::new(), tracker_program: Vec::new(), final_range })
}

fn build_commands(
    schedule: &StageSchedule,
    map: &AddressMap,
    dma_ranges: &[(u16, usize, usize, usize)],
    dst: usize,
    op: DmaOp,
    updates_per_element: u32,
) -> (Vec<DmaCommand>, Vec<(WfKey, ProgramEntry)>) {
    let mut commands: Vec<DmaCommand> = dma_ranges
        .iter()
        .enumerate()
        .map(|(i, &(range_id, chunk, lo, hi))| DmaCommand {
            id: i as u32,
            range_id,
            chunk,
            dst_device: dst,
            op,
            elem_lo: lo,
            elem_hi: hi,
            blocks_total: 0,
            blocks_ready: 0,
            fired: false,
            blocks: Vec::new(),
        })
        .collect();
    let cmd_of_range: HashMap<u16, u32> =
        commands.iter().map(|c| (c.range_id, c.id)).collect();

    let mut tracker_program = Vec::new();
    for wg in 0..schedule.wg_count as u32 {
        for wf in 0..schedule.tiles.wfs_per_wg as u8 {
            for (range_id, elem_lo, elements) in wf_range_segments(schedule, map, wg, wf) {
                let Some(&cmd_id) = cmd_of_range.get(&range_id) else { continue };
                let cmd = &mut commands[cmd_id as usize];
                cmd.blocks_total += 1;
                cmd.blocks.push(BlockRec { wg, wf, elem_lo, elements });
                tracker_program.push((
                    WfKey { wg, wf, range_id },
                    ProgramEntry {
                        threshold: elements as u64 * updates_per_element as u64,
                        elements,
                        cmd: Some(cmd_id),
                    },
                ));
            }
        }
    }
    (commands, tracker_program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TileConfig;
    use crate::gemm::{decompose, stagger, GemmShape};

    fn sched(n_chunks: usize) -> StageSchedule {
        decompose(GemmShape::new(256, 256, 32, 2), TileConfig::default(), 80, 4, n_chunks)
            .unwrap()
    }

    #[test]
    fn remote_map_to_self_is_rejected() {
        let mut map = AddressMap::new(1024);
        assert!(map.remote_map(0, 512, 2, 2, true).is_err());
        assert!(map.remote_map(0, 512, 1, 2, true).is_ok());
    }

    #[test]
    fn overlapping_ranges_are_rejected() {
        let mut map = AddressMap::new(1024);
        map.dma_map(0, 512, 1, true, 2).unwrap();
        assert!(map.dma_map(256, 768, 1, true, 2).is_err());
    }

    #[test]
    fn cover_validation_finds_gaps() {
        let mut map = AddressMap::new(1024);
        map.dma_map(0, 512, 1, true, 2).unwrap();
        assert!(map.validate_cover().is_err());
        map.local_only(512, 1024, 2).unwrap();
        map.validate_cover().unwrap();
    }

    #[test]
    fn ring_rs_program_roles_per_chunk() {
        let s = stagger(&sched(4), 0, 4);
        let p = ring_rs_program(&s, 0, 4).unwrap();
        // chunk 0 remote to GPU-3, chunks 1..2 dma to GPU-3, chunk 3 local
        let modes: Vec<_> = (0..4)
            .map(|c| {
                let r = p.map.locate(c * s.chunk_elems);
                (r.mode, r.target)
            })
            .collect();
        assert_eq!(modes[0], (MapMode::RemoteUpdate, Some(3)));
        assert_eq!(modes[1], (MapMode::DmaUpdate, Some(3)));
        assert_eq!(modes[2], (MapMode::DmaUpdate, Some(3)));
        assert_eq!(modes[3], (MapMode::LocalOnly, None));
        assert_eq!(p.commands.len(), 2); // N-2 steady-state commands
    }

    #[test]
    fn steady_state_commands_cover_chunk_bytes_exactly() {
        let s = stagger(&sched(4), 1, 4);
        let p = ring_rs_program(&s, 1, 4).unwrap();
        for cmd in &p.commands {
            assert_eq!(cmd.bytes(2) as usize, s.chunk_elems * 2);
            // address bijection: block elements sum to the range exactly
            let total: u64 = cmd.blocks.iter().map(|b| b.elements as u64).sum();
            assert_eq!(total as usize, cmd.elem_hi - cmd.elem_lo);
        }
    }

    #[test]
    fn n_two_has_no_steady_state() {
        let s = stagger(&sched(2), 0, 2);
        let p = ring_rs_program(&s, 0, 2).unwrap();
        assert!(p.commands.is_empty());
        assert_eq!(p.map.ranges.len(), 2); // one remote, one local
    }

    #[test]
    fn command_fires_once_when_all_blocks_ready() {
        let s = stagger(&sched(4), 0, 4);
        let p = ring_rs_program(&s, 0, 4).unwrap();
        let mut cmd = p.commands[0].clone();
        for i in 0..cmd.blocks_total {
            let ready = cmd.block_ready();
            assert_eq!(ready, i + 1 == cmd.blocks_total);
        }
        cmd.mark_fired();
        assert!(cmd.fired);
    }

    #[test]
    #[should_panic(expected = "double-fired")]
    fn double_fire_is_fatal() {
        let s = stagger(&sched(4), 0, 4);
        let p = ring_rs_program(&s, 0, 4).unwrap();
        let mut cmd = p.commands[0].clone();
        for _ in 0..cmd.blocks_total {
            cmd.block_ready();
        }
        cmd.mark_fired();
        cmd.mark_fired();
    }

    #[test]
    fn direct_rs_slices_to_all_peers() {
        let s = sched(4);
        let p = direct_rs_program(&s, 1, 4).unwrap();
        let remote = p.map.ranges.iter().filter(|r| r.mode == MapMode::RemoteUpdate).count();
        let local = p.map.ranges.iter().filter(|r| r.mode == MapMode::LocalOnly).count();
        assert_eq!((remote, local), (3, 1));
        assert!(p.commands.is_empty());
    }

    #[test]
    fn direct_rs_n2_degenerates_to_half_remote() {
        let s = sched(2);
        let p = direct_rs_program(&s, 0, 2).unwrap();
        assert_eq!(p.map.ranges.len(), 2);
    }

    #[test]
    fn segments_split_on_straddling_boundaries() {
        // 256x256 output, 8 chunks of 8192 elements = 32 columns each, but
        // WG tiles are 128 columns wide: tiles straddle chunk bounds.
        let s = sched(8);
        let mut map = AddressMap::new(s.shape.output_elems());
        for c in 0..8 {
            map.local_only(c * s.chunk_elems, (c + 1) * s.chunk_elems, 2).unwrap();
        }
        let mut total = 0u64;
        for wg in 0..s.wg_count as u32 {
            for wf in 0..8u8 {
                for (_, _, elems) in wf_range_segments(&s, &map, wg, wf) {
                    total += elems as u64;
                }
            }
        }
        assert_eq!(total as usize, 256 * 256);
    }
}
