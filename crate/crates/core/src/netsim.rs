//! GPU-initiated networking path: send queue, doorbell, NIC processing and
//! completion queue for one GPU-to-NIC channel, plus peer store costs and the
//! point-to-point collectives built on top of them.
//!
//! A message posted at `t` on an idle-or-busy NIC starts at
//! `max(t, nic_free)`, holds the NIC for `o + bytes / bandwidth` and lands at
//! the destination `hops * L` later. Propagation is pipelined, so only the
//! first two terms serialize messages.

use std::collections::VecDeque;

use crate::error::{config_err, Result};
pub use crate::topology::LinkParams;
use crate::topology::{ClusterSpec, GpuId};

/// Timing of one message through the NIC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub posted: f64,
    pub nic_start: f64,
    pub nic_end: f64,
    /// Time the last byte is visible at the destination; also the CQ timestamp.
    pub deliver_at: f64,
}

#[derive(Debug, Clone)]
pub struct Completion<T> {
    pub item: T,
    pub at: f64,
}

#[derive(Debug, Clone)]
struct Pending<T> {
    item: T,
    bytes: u64,
    link: LinkParams,
    posted: f64,
}

/// Send queue, completion queue and doorbell of one GPU's channel.
#[derive(Debug, Clone)]
pub struct QueuePair<T> {
    pub owner: GpuId,
    pub link: LinkParams,
    sq: VecDeque<Pending<T>>,
    cq: VecDeque<Completion<T>>,
    doorbell: u64,
    consumed: u64,
    nic_free: f64,
    in_flight: VecDeque<f64>,
    pub stats: QpStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QpStats {
    pub messages: u64,
    pub bytes: u64,
    /// Sum of NIC busy intervals.
    pub busy_time: f64,
    /// Most messages outstanding (posted, not yet processed by the NIC) at any post.
    pub max_depth: usize,
}

impl<T: Clone> QueuePair<T> {
    pub fn new(owner: GpuId, link: LinkParams) -> Self {
        Self {
            owner,
            link,
            sq: VecDeque::new(),
            cq: VecDeque::new(),
            doorbell: 0,
            consumed: 0,
            nic_free: 0.0,
            in_flight: VecDeque::new(),
            stats: QpStats::default(),
        }
    }

    /// Writes a command packet into the send queue without notifying the NIC.
    pub fn post(&mut self, item: T, bytes: u64, link: LinkParams, t: f64) {
        self.sq.push_back(Pending {
            item,
            bytes,
            link,
            posted: t,
        });
    }

    /// Makes every posted entry visible to the NIC.
    pub fn ring_doorbell(&mut self) {
        self.doorbell = self.consumed + self.sq.len() as u64;
    }

    pub fn doorbell(&self) -> u64 {
        self.doorbell
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    /// NIC consumes rung entries in FIFO order and schedules their completions.
    pub fn service(&mut self) -> Vec<Delivery> {
        let mut out = Vec::new();
        while self.consumed < self.doorbell {
            let p = self.sq.pop_front().expect("doorbell ahead of send queue");
            self.consumed += 1;
            while self.in_flight.front().is_some_and(|&end| end <= p.posted) {
                self.in_flight.pop_front();
            }
            let nic_start = p.posted.max(self.nic_free);
            let busy = p.link.per_message_overhead + p.bytes as f64 / p.link.bandwidth;
            let nic_end = nic_start + busy;
            self.nic_free = nic_end;
            self.in_flight.push_back(nic_end);
            self.stats.max_depth = self.stats.max_depth.max(self.in_flight.len());
            self.stats.messages += 1;
            self.stats.bytes += p.bytes;
            self.stats.busy_time += busy;
            let d = Delivery {
                posted: p.posted,
                nic_start,
                nic_end,
                deliver_at: nic_end + p.link.path_latency(),
            };
            self.cq.push_back(Completion {
                item: p.item,
                at: d.deliver_at,
            });
            out.push(d);
        }
        out
    }

    /// Post one command, ring the doorbell and let the NIC schedule it.
    pub fn post_and_ring(&mut self, item: T, bytes: u64, t: f64) -> Delivery {
        let link = self.link;
        self.post_and_ring_via(item, bytes, link, t)
    }

    /// Like [`post_and_ring`](Self::post_and_ring) with a per-message path (hop count may differ).
    pub fn post_and_ring_via(&mut self, item: T, bytes: u64, link: LinkParams, t: f64) -> Delivery {
        self.post(item, bytes, link, t);
        self.ring_doorbell();
        self.service().pop().expect("one entry serviced")
    }

    /// Pops completions visible at time `now`.
    pub fn poll_cq(&mut self, now: f64) -> Vec<Completion<T>> {
        let mut out = Vec::new();
        while self.cq.front().is_some_and(|c| c.at <= now) {
            out.push(self.cq.pop_front().unwrap());
        }
        out
    }

    pub fn cq_len(&self) -> usize {
        self.cq.len()
    }

    pub fn nic_free_at(&self) -> f64 {
        self.nic_free
    }
}

/// Cost charged to a WG storing `bytes` directly into a peer GPU.
pub fn p2p_store_cost(bytes: u64, link: Option<&LinkParams>) -> Result<f64> {
    match link {
        Some(l) => Ok(bytes as f64 / l.bandwidth + l.path_latency()),
        None => config_err("peer store without a p2p link"),
    }
}

/// Cost of writing `bytes` to the GPU's own memory.
pub fn local_store_cost(bytes: u64, local_bandwidth: f64) -> f64 {
    bytes as f64 / local_bandwidth
}

/// Outcome of a point-to-point All-to-All.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AllToAllResult {
    /// Per GPU: time its outgoing data is sent and all incoming data has arrived.
    pub completion: Vec<f64>,
    pub nic_messages: u64,
    pub nic_bytes: u64,
    pub p2p_bytes: u64,
    pub max_depth: usize,
}

impl AllToAllResult {
    pub fn finish(&self) -> f64 {
        self.completion.iter().copied().fold(0.0, f64::max)
    }
}

/// Direct-push All-to-All: GPU `r` starts at `start[r]` and sends
/// `bytes_per_pair` to every other GPU. Remote pairs go through the NIC in
/// chunks of at most `max_message` bytes, destinations visited in rank order
/// starting after `r`; peers are copied over their own p2p links in parallel;
/// the self block is a local copy.
pub fn all_to_all(
    cluster: &ClusterSpec,
    start: &[f64],
    bytes_per_pair: u64,
    max_message: u64,
    local_bandwidth: f64,
) -> Result<AllToAllResult> {
    let n = cluster.num_gpus();
    if start.len() != n {
        return config_err("one start time per GPU is required");
    }
    if max_message == 0 {
        return config_err("max_message_size must be positive");
    }
    let mut res = AllToAllResult {
        completion: start.to_vec(),
        ..Default::default()
    };
    let mut arrive = vec![0.0f64; n];
    for src in 0..n {
        let sg = cluster.gpu(src);
        let t0 = start[src];
        let mut qp = QueuePair::new(sg, LinkParams {
            bandwidth: cluster.nic_link.bandwidth,
            per_message_overhead: cluster.nic_link.per_message_overhead,
            latency: cluster.nic_link.latency,
            hops: 1,
        });
        let mut done = t0 + local_store_cost(bytes_per_pair, local_bandwidth);
        for k in 1..n {
            let dst = (src + k) % n;
            let dg = cluster.gpu(dst);
            let link = cluster.link_between(sg, dg)?;
            let at = if dg.node == sg.node {
                res.p2p_bytes += bytes_per_pair;
                t0 + p2p_store_cost(bytes_per_pair, Some(&link))?
            } else {
                let mut left = bytes_per_pair;
                loop {
                    let chunk = left.min(max_message);
                    let last = qp.post_and_ring_via((), chunk, link, t0).deliver_at;
                    left -= chunk;
                    if left == 0 {
                        break last;
                    }
                }
            };
            done = done.max(at);
            arrive[dst] = arrive[dst].max(at);
        }
        res.nic_messages += qp.stats.messages;
        res.nic_bytes += qp.stats.bytes;
        res.max_depth = res.max_depth.max(qp.stats.max_depth);
        res.completion[src] = res.completion[src].max(done).max(qp.nic_free_at());
    }
    for (c, a) in res.completion.iter_mut().zip(arrive) {
        *c = c.max(a);
    }
    Ok(res)
}

/// Ring AllReduce over all GPUs: `2 (n - 1)` steps, each moving `bytes / n`
/// to the ring successor. Step time is set by the slowest hop of the ring.
pub fn ring_allreduce(cluster: &ClusterSpec, bytes: u64, start: f64) -> Result<f64> {
    let n = cluster.num_gpus();
    if n == 1 {
        return Ok(start);
    }
    let ring = ring_order(cluster);
    let chunk = bytes.div_ceil(n as u64);
    let mut step_time = 0.0f64;
    for i in 0..n {
        let (a, b) = (cluster.gpu(ring[i]), cluster.gpu(ring[(i + 1) % n]));
        let link = cluster.link_between(a, b)?;
        let mut qp = QueuePair::new(a, link);
        let d = qp.post_and_ring((), chunk, 0.0);
        step_time = step_time.max(d.deliver_at);
    }
    Ok(start + 2.0 * (n as f64 - 1.0) * step_time)
}

/// Ring order visiting a torus row by row in a snake so consecutive members are adjacent.
pub fn ring_order(cluster: &ClusterSpec) -> Vec<usize> {
    use crate::topology::TopologyKind;
    let g = cluster.gpus_per_node;
    let nodes: Vec<usize> = match cluster.topology {
        TopologyKind::Flat => (0..cluster.num_nodes).collect(),
        TopologyKind::Torus2d { rows, cols } => (0..rows)
            .flat_map(|r| {
                let row: Vec<usize> = (0..cols).map(|c| r * cols + c).collect();
                if r % 2 == 0 {
                    row
                } else {
                    row.into_iter().rev().collect()
                }
            })
            .collect(),
    };
    nodes
        .into_iter()
        .flat_map(|node| (0..g).map(move |l| node * g + l))
        .collect()
}
