//! Devices, ring/fully-connected construction, and the link
//! bandwidth-latency transfer model.
//!
//! Links serialize: back-to-back transfers on one direction never interleave
//! bytes, and completion times are monotone in submission order. Busy time is
//! tracked in picoseconds internally so integer-nanosecond events do not
//! accumulate rounding drift; 1 GB/s is exactly 1 byte/ns.

use crate::config::ConfigError;
use crate::engine::Ns;

/// One directed link.
#[derive(Debug, Clone)]
pub struct Link {
    pub src: usize,
    pub dst: usize,
    /// Bytes per nanosecond (== GB/s).
    pub bandwidth: f64,
    pub latency_ns: Ns,
}

impl Link {
    /// Pure alpha-beta transfer time for a single message on an idle link.
    pub fn transfer_time(&self, bytes: u64) -> Result<Ns, ConfigError> {
        if bytes == 0 {
            return Err(ConfigError::invalid("link", "zero-byte transfer"));
        }
        let occupancy_ps = bytes as f64 * 1000.0 / self.bandwidth;
        Ok(self.latency_ns + (occupancy_ps / 1000.0).round() as Ns)
    }
}

/// Mutable per-link state during a run.
#[derive(Debug, Clone, Default)]
pub struct LinkState {
    busy_until_ps: f64,
    pub bytes: u64,
    pub messages: u64,
}

impl LinkState {
    /// Submit a message at `now`; returns its arrival time at the far end.
    /// Serializes after any in-flight bytes on this direction.
    pub fn submit(&mut self, link: &Link, now: Ns, bytes: u64) -> Ns {
        assert!(bytes > 0, "zero-byte link message");
        let start = (now as f64 * 1000.0).max(self.busy_until_ps);
        self.busy_until_ps = start + bytes as f64 * 1000.0 / link.bandwidth;
        self.bytes += bytes;
        self.messages += 1;
        (self.busy_until_ps / 1000.0).ceil() as Ns + link.latency_ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    FullyConnected,
}

/// Device count plus the directed link set.
#[derive(Debug, Clone)]
pub struct Topology {
    pub kind: TopologyKind,
    pub n_devices: usize,
    pub links: Vec<Link>,
    /// links index by (src, dst); usize::MAX where absent.
    index: Vec<usize>,
}

impl Topology {
    /// Ring of `n` devices: N forward links (i -> i+1) and N backward links.
    pub fn ring(n: usize, bandwidth_gbps: f64, latency_ns: Ns) -> Result<Topology, ConfigError> {
        if n < 2 {
            return Err(ConfigError::invalid("system.n_gpus", "ring needs >= 2 devices"));
        }
        let mut links = Vec::with_capacity(2 * n);
        for i in 0..n {
            links.push(Link { src: i, dst: (i + 1) % n, bandwidth: bandwidth_gbps, latency_ns });
        }
        for i in 0..n {
            links.push(Link { src: i, dst: (i + n - 1) % n, bandwidth: bandwidth_gbps, latency_ns });
        }
        Ok(Self::with_links(TopologyKind::Ring, n, links))
    }

    /// All-pairs directed links, one per (src, dst).
    pub fn fully_connected(
        n: usize,
        bandwidth_gbps: f64,
        latency_ns: Ns,
    ) -> Result<Topology, ConfigError> {
        if n < 2 {
            return Err(ConfigError::invalid("system.n_gpus", "topology needs >= 2 devices"));
        }
        let mut links = Vec::new();
        for src in 0..n {
            for dst in 0..n {
                if src != dst {
                    links.push(Link { src, dst, bandwidth: bandwidth_gbps, latency_ns });
                }
            }
        }
        Ok(Self::with_links(TopologyKind::FullyConnected, n, links))
    }

    fn with_links(kind: TopologyKind, n: usize, links: Vec<Link>) -> Topology {
        let mut index = vec![usize::MAX; n * n];
        for (i, l) in links.iter().enumerate() {
            let slot = &mut index[l.src * n + l.dst];
            // Ring keeps the first (forward) link for a (src,dst) pair; for
            // n=2 the backward link duplicates it and stays addressable by id.
            if *slot == usize::MAX {
                *slot = i;
            }
        }
        Topology { kind, n_devices: n, links, index }
    }

    pub fn successor(&self, dev: usize) -> usize {
        (dev + 1) % self.n_devices
    }

    pub fn predecessor(&self, dev: usize) -> usize {
        (dev + self.n_devices - 1) % self.n_devices
    }

    /// Link id for src -> dst; panics if the topology has no such link.
    pub fn link_id(&self, src: usize, dst: usize) -> usize {
        let id = self.index[src * self.n_devices + dst];
        assert!(id != usize::MAX, "no link {} -> {}", src, dst);
        id
    }
}
