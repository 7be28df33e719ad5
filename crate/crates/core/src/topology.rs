//! Cluster description: nodes, GPUs per node, peer links and the inter-node
//! network, plus peer/remote reachability queries.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Intra-node GPU-to-GPU link (xGMI / NVLink class).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct P2pLink {
    /// bytes/s
    pub bandwidth: f64,
    /// seconds
    pub latency: f64,
}

/// NIC attached to each GPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NicLink {
    /// bytes/s
    pub bandwidth: f64,
    /// NIC processing time charged per message, seconds.
    pub per_message_overhead: f64,
    /// Per-hop propagation latency, seconds.
    pub latency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Every node is one hop from every other node.
    Flat,
    /// Nodes laid out row-major on a `rows x cols` torus.
    Torus2d { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub num_nodes: usize,
    pub gpus_per_node: usize,
    #[serde(default)]
    pub p2p_link: Option<P2pLink>,
    pub nic_link: NicLink,
    pub topology: TopologyKind,
}

/// A GPU addressed by node and position inside the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GpuId {
    pub node: usize,
    pub local_gpu: usize,
}

impl GpuId {
    pub const fn new(node: usize, local_gpu: usize) -> Self {
        Self { node, local_gpu }
    }
}

impl std::fmt::Display for GpuId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.node, self.local_gpu)
    }
}

/// Cost parameters of one GPU-to-GPU path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// bytes/s
    pub bandwidth: f64,
    /// seconds per message
    pub per_message_overhead: f64,
    /// seconds per hop
    pub latency: f64,
    pub hops: u32,
}

impl LinkParams {
    /// Total propagation latency along the path.
    pub fn path_latency(&self) -> f64 {
        self.latency * f64::from(self.hops)
    }

    /// Multiplies every time component by `s` (bandwidth divided by `s`).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            bandwidth: self.bandwidth / s,
            per_message_overhead: self.per_message_overhead * s,
            latency: self.latency * s,
            hops: self.hops,
        }
    }
}

impl ClusterSpec {
    /// One GPU per node on two nodes over 20 GB/s InfiniBand.
    pub fn inter_node_pair() -> Self {
        Self {
            num_nodes: 2,
            gpus_per_node: 1,
            p2p_link: None,
            nic_link: NicLink {
                bandwidth: 20e9,
                per_message_overhead: 0.4e-6,
                latency: 2e-6,
            },
            topology: TopologyKind::Flat,
        }
    }

    /// Single node with four fully connected GPUs over 80 GB/s xGMI.
    pub fn intra_node_quad() -> Self {
        Self {
            num_nodes: 1,
            gpus_per_node: 4,
            p2p_link: Some(P2pLink {
                bandwidth: 80e9,
                latency: 0.5e-6,
            }),
            nic_link: NicLink {
                bandwidth: 20e9,
                per_message_overhead: 0.4e-6,
                latency: 2e-6,
            },
            topology: TopologyKind::Flat,
        }
    }

    /// 2D torus of `rows x cols` single-GPU nodes, 200 Gb/s links, 700 ns per hop.
    pub fn torus(rows: usize, cols: usize) -> Self {
        Self {
            num_nodes: rows * cols,
            gpus_per_node: 1,
            p2p_link: None,
            nic_link: NicLink {
                bandwidth: 200e9 / 8.0,
                per_message_overhead: 0.4e-6,
                latency: 700e-9,
            },
            topology: TopologyKind::Torus2d { rows, cols },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.gpus_per_node == 0 {
            return config_err("cluster needs at least one node and one GPU per node");
        }
        if self.gpus_per_node > 1 && self.p2p_link.is_none() {
            return config_err("p2p_link is required when gpus_per_node > 1");
        }
        if let Some(p2p) = &self.p2p_link {
            if !(p2p.bandwidth > 0.0) || !(p2p.latency >= 0.0) {
                return config_err("p2p link needs bandwidth > 0 and latency >= 0");
            }
        }
        let nic = &self.nic_link;
        if !(nic.bandwidth > 0.0) || !(nic.latency >= 0.0) || !(nic.per_message_overhead >= 0.0) {
            return config_err("NIC link needs bandwidth > 0, latency >= 0 and overhead >= 0");
        }
        if let TopologyKind::Torus2d { rows, cols } = self.topology {
            if rows * cols != self.num_nodes {
                return config_err(format!(
                    "torus {rows}x{cols} does not match {} nodes",
                    self.num_nodes
                ));
            }
        }
        Ok(())
    }

    pub fn num_gpus(&self) -> usize {
        self.num_nodes * self.gpus_per_node
    }

    /// Dense rank of a GPU: nodes major, local GPU minor.
    pub fn rank(&self, gpu: GpuId) -> usize {
        gpu.node * self.gpus_per_node + gpu.local_gpu
    }

    pub fn gpu(&self, rank: usize) -> GpuId {
        GpuId::new(rank / self.gpus_per_node, rank % self.gpus_per_node)
    }

    pub fn gpus(&self) -> impl Iterator<Item = GpuId> + '_ {
        (0..self.num_gpus()).map(|r| self.gpu(r))
    }

    pub fn check_gpu(&self, gpu: GpuId) -> Result<()> {
        if gpu.node >= self.num_nodes || gpu.local_gpu >= self.gpus_per_node {
            return config_err(format!(
                "GPU {gpu} outside a {}x{} cluster",
                self.num_nodes, self.gpus_per_node
            ));
        }
        Ok(())
    }

    /// Whether `b` is reachable from `a` with direct loads and stores.
    pub fn is_peer(&self, a: GpuId, b: GpuId) -> Result<bool> {
        self.check_gpu(a)?;
        self.check_gpu(b)?;
        Ok(a.node == b.node)
    }

    /// Network hops between two nodes.
    pub fn node_hops(&self, a: usize, b: usize) -> u32 {
        match self.topology {
            TopologyKind::Flat => u32::from(a != b),
            TopologyKind::Torus2d { rows, cols } => {
                let (ra, ca) = (a / cols, a % cols);
                let (rb, cb) = (b / cols, b % cols);
                let wrap = |x: usize, y: usize, n: usize| {
                    let d = x.abs_diff(y);
                    d.min(n - d)
                };
                (wrap(ra, rb, rows) + wrap(ca, cb, cols)) as u32
            }
        }
    }

    /// Link parameters for a transfer from `a` to `b`.
    pub fn link_between(&self, a: GpuId, b: GpuId) -> Result<LinkParams> {
        if a == b {
            return config_err(format!("no link from GPU {a} to itself"));
        }
        if self.is_peer(a, b)? {
            let p2p = self
                .p2p_link
                .ok_or_else(|| crate::Error::Config("peer GPUs without a p2p link".into()))?;
            Ok(LinkParams {
                bandwidth: p2p.bandwidth,
                per_message_overhead: 0.0,
                latency: p2p.latency,
                hops: 1,
            })
        } else {
            Ok(LinkParams {
                bandwidth: self.nic_link.bandwidth,
                per_message_overhead: self.nic_link.per_message_overhead,
                latency: self.nic_link.latency,
                hops: self.node_hops(a.node, b.node),
            })
        }
    }

    /// Same cluster with every time quantity multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.nic_link.bandwidth /= s;
        out.nic_link.per_message_overhead *= s;
        out.nic_link.latency *= s;
        if let Some(p2p) = out.p2p_link.as_mut() {
            p2p.bandwidth /= s;
            p2p.latency *= s;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(nodes: usize, gpus: usize) -> ClusterSpec {
        let mut c = ClusterSpec::intra_node_quad();
        c.num_nodes = nodes;
        c.gpus_per_node = gpus;
        c
    }

    #[test]
    fn peers_within_a_node() {
        let c = ClusterSpec::intra_node_quad();
        assert!(c.is_peer(GpuId::new(0, 0), GpuId::new(0, 1)).unwrap());
        assert!(c.is_peer(GpuId::new(0, 0), GpuId::new(0, 0)).unwrap());
    }

    #[test]
    fn remote_across_nodes() {
        let c = ClusterSpec::inter_node_pair();
        assert!(!c.is_peer(GpuId::new(0, 0), GpuId::new(1, 0)).unwrap());
    }

    #[test]
    fn invalid_gpu_rejected() {
        let c = ClusterSpec::inter_node_pair();
        assert!(c.is_peer(GpuId::new(2, 0), GpuId::new(0, 0)).is_err());
        assert!(c.is_peer(GpuId::new(0, 1), GpuId::new(0, 0)).is_err());
    }

    #[test]
    fn link_selection() {
        let c = ClusterSpec::intra_node_quad();
        let l = c.link_between(GpuId::new(0, 0), GpuId::new(0, 3)).unwrap();
        assert_eq!(l.bandwidth, 80e9);
        let c = ClusterSpec::inter_node_pair();
        let l = c.link_between(GpuId::new(0, 0), GpuId::new(1, 0)).unwrap();
        assert_eq!(l.bandwidth, 20e9);
        assert_eq!(l.hops, 1);
        assert!(c.link_between(GpuId::new(1, 0), GpuId::new(1, 0)).is_err());
    }

    #[test]
    fn torus_hops_and_latency() {
        let c = ClusterSpec::torus(4, 4);
        let l = c.link_between(GpuId::new(0, 0), GpuId::new(2, 0)).unwrap();
        assert_eq!(l.hops, 2);
        assert!((l.path_latency() - 2.0 * 700e-9).abs() < 1e-18);
        // wraparound: column 3 is one hop from column 0
        assert_eq!(c.node_hops(0, 3), 1);
        // row 3 is one hop from row 0
        assert_eq!(c.node_hops(0, 12), 1);
        assert_eq!(c.node_hops(0, 10), 4);
    }

    #[test]
    fn validation() {
        assert!(flat(1, 1).validate().is_ok());
        let mut c = flat(1, 2);
        c.p2p_link = None;
        assert!(c.validate().is_err());
        assert!(flat(0, 1).validate().is_err());
        let mut c = ClusterSpec::torus(4, 4);
        c.num_nodes = 15;
        assert!(c.validate().is_err());
        let mut c = ClusterSpec::inter_node_pair();
        c.nic_link.bandwidth = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rank_roundtrip() {
        let c = flat(3, 4);
        for r in 0..c.num_gpus() {
            assert_eq!(c.rank(c.gpu(r)), r);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn torus_hops_bounded_and_symmetric(rows in 1usize..9, cols in 1usize..9, a in 0usize..64, b in 0usize..64) {
                let c = ClusterSpec::torus(rows, cols);
                let (a, b) = (a % c.num_nodes, b % c.num_nodes);
                let h = c.node_hops(a, b);
                prop_assert_eq!(h, c.node_hops(b, a));
                prop_assert!(h as usize <= rows / 2 + cols / 2);
                prop_assert_eq!(h == 0, a == b);
            }

            #[test]
            fn peer_is_equivalence(nodes in 1usize..5, gpus in 1usize..5, x in 0usize..25, y in 0usize..25, z in 0usize..25) {
                let c = flat(nodes, gpus);
                let n = c.num_gpus();
                let (a, b, d) = (c.gpu(x % n), c.gpu(y % n), c.gpu(z % n));
                prop_assert!(c.is_peer(a, a).unwrap());
                prop_assert_eq!(c.is_peer(a, b).unwrap(), c.is_peer(b, a).unwrap());
                if c.is_peer(a, b).unwrap() && c.is_peer(b, d).unwrap() {
                    prop_assert!(c.is_peer(a, d).unwrap());
                }
                if a != b {
                    prop_assert_eq!(c.link_between(a, b).unwrap(), c.link_between(b, a).unwrap());
                }
            }
        }
    }
}
