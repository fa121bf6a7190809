//! Track-and-trigger table at the memory controller.
//!
//! Counts local, remote, and DMA updates per wavefront output region at
//! enqueue time (off the critical path: observing adds no service latency)
//! and fires the owning DMA block exactly once when the counter reaches its
//! programmed threshold — WF tile elements times the updates expected per
//! element. Entries are tagged by (wg id, wf id, map range); the range
//! component disambiguates the rare WF tile that straddles an address-map
//! boundary and is degenerate otherwise. Sets are indexed by the WG id LSBs.

use std::collections::HashMap;

use crate::config::TrackerConfig;
use crate::gemm::StageSchedule;
use crate::memory::WfMeta;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TrackerError {
    #[error("tracker set {set} overflow ({ways} ways) on wg={wg} wf={wf}: raise tracker.ways")]
    SetOverflow { set: usize, ways: usize, wg: u32, wf: u8 },
    #[error("tracker counter overran threshold for wg={wg} wf={wf} range={range} ({got} > {threshold}): double-counted update")]
    Overcount { wg: u32, wf: u8, range: u16, got: u64, threshold: u64 },
    #[error("{live} tracker entries still live at kernel boundary (lost triggers)")]
    Stragglers { live: usize },
}

/// Key of one tracked WF region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WfKey {
    pub wg: u32,
    pub wf: u8,
    pub range_id: u16,
}

impl From<&WfMeta> for WfKey {
    fn from(m: &WfMeta) -> WfKey {
        WfKey { wg: m.wg, wf: m.wf, range_id: m.range_id }
    }
}

/// Threshold and owning DMA block, programmed by `dma_map`.
#[derive(Debug, Clone, Copy)]
pub struct ProgramEntry {
    /// Elements expected: in-range WF elements x updates per element.
    pub threshold: u64,
    /// Elements of the tracked region (threshold / updates-per-element).
    pub elements: u32,
    /// Owning DMA command, if any (None for regions tracked only for
    /// completion accounting in tests).
    pub cmd: Option<u32>,
}

#[derive(Debug, Clone)]
struct Entry {
    key: WfKey,
    start_vaddr: u64,
    counter: u64,
    threshold: u64,
}

/// Fired when a tracked WF region has seen all expected updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerEvent {
    pub wg: u32,
    pub wf: u8,
    pub range_id: u16,
    pub cmd: Option<u32>,
    pub start_vaddr: u64,
    pub elements: u32,
}

#[derive(Debug)]
pub struct TrackerTable {
    sets: usize,
    ways: usize,
    entries: Vec<Vec<Entry>>,
    program: HashMap<WfKey, ProgramEntry>,
    live: usize,
    pub fired: u64,
    pub peak_ways: usize,
}

impl TrackerTable {
    pub fn new(cfg: &TrackerConfig) -> TrackerTable {
        TrackerTable {
            sets: cfg.sets,
            ways: cfg.ways,
            entries: vec![Vec::new(); cfg.sets],
            program: HashMap::new(),
            live: 0,
            fired: 0,
            peak_ways: 0,
        }
    }

    /// Install the threshold/command mapping for one WF region.
    pub fn program(&mut self, key: WfKey, entry: ProgramEntry) {
        debug_assert!(entry.threshold > 0);
        self.program.insert(key, entry);
    }

    pub fn programmed_regions(&self) -> usize {
        self.program.len()
    }

    /// Modeled SRAM footprint: tag (wg_msb + 3-bit wf + range) ~7B,
    /// start vaddr 8B, counter 4B, threshold 4B per way.
    pub fn size_bytes(&self) -> usize {
        self.sets * self.ways * (7 + 8 + 4 + 4)
    }

    fn set_of(&self, wg: u32) -> usize {
        (wg as usize) & (self.sets - 1)
    }

    /// Observe one enqueued update. Counts elements toward the region's
    /// threshold; returns the trigger when the final expected update lands.
    /// Updates to unprogrammed regions are ignored.
    pub fn observe(
        &mut self,
        meta: &WfMeta,
        vaddr: u64,
    ) -> Result<Option<TriggerEvent>, TrackerError> {
        let key = WfKey::from(meta);
        let Some(prog) = self.program.get(&key).copied() else {
            return Ok(None);
        };
        let set_idx = self.set_of(meta.wg);
        let ways = self.ways;
        let set = &mut self.entries[set_idx];
        let slot = match set.iter().position(|e| e.key == key) {
            Some(i) => i,
            None => {
                if set.len() >= ways {
                    return Err(TrackerError::SetOverflow {
                        set: set_idx,
                        ways,
                        wg: meta.wg,
                        wf: meta.wf,
                    });
                }
                set.push(Entry {
                    key,
                    start_vaddr: vaddr,
                    counter: 0,
                    threshold: prog.threshold,
                });
                self.live += 1;
                self.peak_ways = self.peak_ways.max(set.len());
                set.len() - 1
            }
        };
        let e = &mut set[slot];
        e.counter += meta.elements as u64;
        e.start_vaddr = e.start_vaddr.min(vaddr);
        if e.counter > e.threshold {
            return Err(TrackerError::Overcount {
                wg: meta.wg,
                wf: meta.wf,
                range: meta.range_id,
                got: e.counter,
                threshold: e.threshold,
            });
        }
        if e.counter == e.threshold {
            let start_vaddr = e.start_vaddr;
            set.swap_remove(slot);
            self.live -= 1;
            self.fired += 1;
            return Ok(Some(TriggerEvent {
                wg: key.wg,
                wf: key.wf,
                range_id: key.range_id,
                cmd: prog.cmd,
                start_vaddr,
                elements: prog.elements,
            }));
        }
        Ok(None)
    }

    /// Kernel boundary: every tracked region must have fired.
    pub fn assert_drained(&self) -> Result<(), TrackerError> {
        if self.live != 0 {
            return Err(TrackerError::Stragglers { live: self.live });
        }
        Ok(())
    }
}

/// Driver formula for the tracked region size: padded output / WF count.
pub fn wf_tile_size(schedule: &StageSchedule) -> usize {
    schedule.wf_tile_size()
}
