//! Discrete-event timing of the fused operator and of the bulk-synchronous
//! baseline (per-table embedding kernels, then a point-to-point All-to-All).

use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingData, EmbeddingProblem, ELEMENT_BYTES};
use crate::error::{config_err, ProtocolError, Result};
use crate::netsim::{all_to_all, QueuePair};
use crate::protocol::{Channel, DataWorld, EventLog, FusedPlan, ProtocolState, PutKind, Step, StoreKind, TriggerKind};
use crate::scheduler::{skew, OccupancyConfig, Policy};
use crate::topology::{ClusterSpec, LinkParams};

mod sweep;

pub use sweep::{run_point, summarize, sweep, write_csv, Experiment, SweepGrid, SweepRow};

/// Cost model of embedding WGs on one GPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeModel {
    /// Fixed cost of one logical WG, seconds.
    pub per_wg_base: f64,
    /// Seconds per pooled element (bag entry x embedding dimension).
    pub per_element: f64,
    /// Concurrent WGs up to which there is no memory contention.
    pub contention_knee: f64,
    /// Multiplier growth per concurrent WG above the knee.
    pub contention_slope: f64,
    /// Issue cost of each PUT posted by a WG, seconds.
    pub api_overhead: f64,
    /// Completion bookkeeping (atomic OR on the slice mask) per logical WG, seconds.
    pub sync_overhead: f64,
    pub kernel_launch: f64,
    /// Bytes/s a WG's results are written to the GPU's own memory.
    pub local_store_bw: f64,
    /// Cost of one flag check while draining, seconds.
    pub flag_poll: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        Self {
            per_wg_base: 1.0e-6,
            per_element: 1.3e-10,
            contention_knee: 85.33,
            contention_slope: 0.04125,
            api_overhead: 0.3e-6,
            sync_overhead: 1.0e-6,
            kernel_launch: 5.0e-6,
            local_store_bw: 1.0e12,
            flag_poll: 20e-9,
        }
    }
}

impl ComputeModel {
    /// Every overhead zero and stores free; only WG work remains.
    pub fn compute_only(&self) -> Self {
        Self {
            api_overhead: 0.0,
            sync_overhead: 0.0,
            kernel_launch: 0.0,
            local_store_bw: f64::INFINITY,
            flag_poll: 0.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("per_wg_base", self.per_wg_base),
            ("per_element", self.per_element),
            ("contention_knee", self.contention_knee),
            ("contention_slope", self.contention_slope),
            ("api_overhead", self.api_overhead),
            ("sync_overhead", self.sync_overhead),
            ("kernel_launch", self.kernel_launch),
            ("flag_poll", self.flag_poll),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return config_err(format!("compute.{name} must be finite and >= 0"));
            }
        }
        if !(self.local_store_bw > 0.0) {
            return config_err("compute.local_store_bw must be > 0");
        }
        Ok(())
    }

    /// Slowdown with `concurrent` WGs running on the GPU.
    pub fn contention(&self, concurrent: usize) -> f64 {
        let c = concurrent as f64;
        if c <= self.contention_knee {
            1.0
        } else {
            1.0 + self.contention_slope * (c - self.contention_knee)
        }
    }

    /// Uncontended compute time of a WG pooling `elements` values.
    pub fn wg_work(&self, elements: u64) -> f64 {
        self.per_wg_base + self.per_element * elements as f64
    }

    pub fn store_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.local_store_bw
    }
}

/// A complete single-point configuration of the timing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub problem: EmbeddingProblem,
    pub cluster: ClusterSpec,
    pub compute: ComputeModel,
    pub occupancy: OccupancyConfig,
    pub policy: Policy,
    pub slice_size: usize,
    pub vectors_per_wg: usize,
    pub zero_copy: bool,
    /// Largest message of the baseline collective, bytes.
    pub max_message_size: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.cluster.validate()?;
        self.problem.check_cluster(&self.cluster)?;
        self.compute.validate()?;
        self.occupancy.validate()?;
        if self.max_message_size == 0 {
            return config_err("max_message_size must be positive");
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<FusedPlan> {
        self.validate()?;
        Ok(FusedPlan::new(
            &self.problem,
            &self.cluster,
            self.slice_size,
            self.vectors_per_wg,
            self.occupancy.persistent_wgs(),
            self.policy,
        )?
        .with_zero_copy(self.zero_copy))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Fused,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activity {
    /// Pooling of one logical WG at the given contention multiplier.
    Compute { wg: usize, contention: f64 },
    /// Result stores and completion bookkeeping after a compute interval.
    Store { wg: usize },
    /// Issuing the slice's PUTs or local copy.
    Trigger { slice: usize },
    /// Polling the flag subset until exit.
    Drain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub activity: Activity,
}

/// Intervals of one persistent WG (fused) or one WG slot (baseline).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkerTimeline {
    pub gpu: usize,
    pub worker: usize,
    pub intervals: Vec<Interval>,
}

/// Span of a kernel or collective on one GPU.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phase {
    pub name: String,
    pub gpu: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    /// Messages through NICs.
    pub messages: u64,
    /// Bytes through NICs.
    pub bytes: u64,
    pub p2p_bytes: u64,
    /// Bytes stored anywhere other than their final destination buffer.
    pub intermediate_bytes: u64,
    pub cq_depth_max: usize,
}

#[derive(Debug, Clone)]
pub struct Timeline {
    pub mode: SimMode,
    pub workers: Vec<WorkerTimeline>,
    pub phases: Vec<Phase>,
    /// Per GPU rank.
    pub gpu_completion: Vec<f64>,
    pub node_completion: Vec<f64>,
    pub counters: Counters,
    /// Protocol events with timestamps; empty unless recording was requested.
    pub log: EventLog,
    /// Output tensors when payload tracking was on.
    pub outputs: Option<Vec<Vec<f32>>>,
}

/// One record of the exported trace; times in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub name: String,
    pub actor: String,
    pub ts: f64,
    pub dur: f64,
}

impl Timeline {
    pub fn total_time(&self) -> f64 {
        self.node_completion.iter().copied().fold(0.0, f64::max)
    }

    /// Relative spread of node completion times.
    pub fn skew(&self) -> f64 {
        skew(&self.node_completion).unwrap_or(0.0)
    }

    /// Sum over compute intervals of length / contention multiplier.
    pub fn compute_work(&self) -> f64 {
        self.workers
            .iter()
            .flat_map(|w| &w.intervals)
            .map(|i| match i.activity {
                Activity::Compute { contention, .. } => (i.end - i.start) / contention,
                _ => 0.0,
            })
            .sum()
    }

    /// Checks that every worker's intervals are well formed, ordered and disjoint.
    pub fn check_intervals(&self) -> Result<()> {
        for w in &self.workers {
            let mut last = f64::NEG_INFINITY;
            for i in &w.intervals {
                if !(i.start <= i.end) || i.start < last {
                    return config_err(format!(
                        "gpu {} worker {}: interval [{}, {}] overlaps or is reversed",
                        w.gpu, w.worker, i.start, i.end
                    ));
                }
                last = i.end;
            }
        }
        Ok(())
    }

    /// Latest end of a compute interval on `gpu`.
    pub fn compute_end(&self, gpu: usize) -> f64 {
        self.workers
            .iter()
            .filter(|w| w.gpu == gpu)
            .flat_map(|w| &w.intervals)
            .filter(|i| matches!(i.activity, Activity::Compute { .. }))
            .map(|i| i.end)
            .fold(0.0, f64::max)
    }

    pub fn trace_records(&self) -> Vec<TraceRecord> {
        let us = 1e6;
        let mut out: Vec<TraceRecord> = self
            .phases
            .iter()
            .map(|p| TraceRecord {
                name: p.name.clone(),
                actor: format!("gpu{}", p.gpu),
                ts: p.start * us,
                dur: (p.end - p.start) * us,
            })
            .collect();
        for w in &self.workers {
            let actor = format!("gpu{}/wg{}", w.gpu, w.worker);
            for i in &w.intervals {
                let name = match i.activity {
                    Activity::Compute { wg, .. } => format!("wg {wg}"),
                    Activity::Store { wg } => format!("store {wg}"),
                    Activity::Trigger { slice } => format!("trigger {slice}"),
                    Activity::Drain => "drain".to_string(),
                };
                out.push(TraceRecord {
                    name,
                    actor: actor.clone(),
                    ts: i.start * us,
                    dur: (i.end - i.start) * us,
                });
            }
        }
        out
    }

    /// JSON array of `{name, actor, ts, dur}`.
    pub fn write_trace<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, &self.trace_records())?;
        Ok(())
    }
}

fn node_completion(cluster: &ClusterSpec, gpu_completion: &[f64]) -> Vec<f64> {
    let g = cluster.gpus_per_node;
    gpu_completion
        .chunks(g)
        .map(|c| c.iter().copied().fold(0.0, f64::max))
        .collect()
}

/// Pooled elements of batch rows `rows` (bag sizes x dimension).
fn pooled_elements(problem: &EmbeddingProblem, rows: std::ops::Range<usize>) -> u64 {
    rows.map(|r| problem.pooling.for_row(r) as u64).sum::<u64>() * problem.embedding_dim as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EvKind {
    WgDone(usize),
    Deliver(usize),
    Exit(usize),
}

/// Event ordered by (time, sequence); reversed so the max-heap pops the earliest.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ev {
    t: f64,
    seq: u64,
    kind: EvKind,
}

impl Eq for Ev {}

impl Ord for Ev {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

/// Options of a fused timing run.
#[derive(Debug, Clone, Copy, Default)]
pub struct FusedOptions<'a> {
    /// Run the data path too and return the outputs.
    pub payload: Option<&'a EmbeddingData>,
    /// Keep a timestamped protocol event log.
    pub record_events: bool,
}

struct FusedSim<'a> {
    cfg: &'a SimConfig,
    plan: &'a FusedPlan,
    state: ProtocolState,
    world: DataWorld<'a>,
    heap: BinaryHeap<Ev>,
    seq: u64,
    next: Vec<usize>,
    active: Vec<usize>,
    loop_end: Vec<f64>,
    outstanding: Vec<usize>,
    draining: Vec<bool>,
    exit_at: Vec<f64>,
    qps: Vec<QueuePair<u64>>,
    last_delivery: Vec<f64>,
    workers: Vec<WorkerTimeline>,
    p2p_bytes: u64,
    cq_depth_max: usize,
}

impl<'a> FusedSim<'a> {
    fn push(&mut self, t: f64, kind: EvKind) {
        self.seq += 1;
        self.heap.push(Ev { t, seq: self.seq, kind });
    }

    fn poll_time(&self, pwg: usize) -> f64 {
        self.plan.drain_set(pwg).len() as f64 * self.cfg.compute.flag_poll
    }

    fn start_next(&mut self, pwg: usize, t: f64) {
        let list = self.plan.task_list(pwg);
        let (rank, _) = self.plan.pwg_location(pwg);
        if self.next[pwg] == list.len() {
            self.active[rank] -= 1;
            self.loop_end[pwg] = t;
            self.draining[pwg] = true;
            if self.outstanding[pwg] == 0 {
                let at = t + self.poll_time(pwg);
                self.push(at, EvKind::Exit(pwg));
            }
            return;
        }
        let wg_ix = list[self.next[pwg]];
        self.next[pwg] += 1;
        let m = &self.cfg.compute;
        let wg = &self.plan.map.wgs[wg_ix];
        let p = &self.cfg.problem;
        let factor = m.contention(self.active[rank]);
        let compute = m.wg_work(pooled_elements(p, wg.out_row_start..wg.out_row_start + wg.rows)) * factor;
        let bytes = (wg.rows * p.embedding_dim) as u64 * ELEMENT_BYTES;
        let store = match self.plan.store_kind(wg.slice_ix) {
            StoreKind::PeerDirect => bytes as f64 / self.cfg.cluster.p2p_link.map_or(m.local_store_bw, |l| l.bandwidth),
            _ => m.store_time(bytes),
        } + m.sync_overhead;
        let ivs = &mut self.workers[pwg].intervals;
        ivs.push(Interval {
            start: t,
            end: t + compute,
            activity: Activity::Compute {
                wg: wg_ix,
                contention: factor,
            },
        });
        ivs.push(Interval {
            start: t + compute,
            end: t + compute + store,
            activity: Activity::Store { wg: wg_ix },
        });
        self.push(t + compute + store, EvKind::WgDone(pwg));
    }

    fn flag_set(&mut self, slice: usize, t: f64) {
        let info = &self.plan.map.slices[slice];
        let persistent = self.plan.schedules[info.dest_rank].num_persistent_wgs();
        let owner = self.plan.pwg_index(info.dest_rank, info.flag_index % persistent);
        self.outstanding[owner] -= 1;
        if self.outstanding[owner] == 0 && self.draining[owner] {
            let at = (t + self.cfg.compute.flag_poll).max(self.loop_end[owner] + self.poll_time(owner));
            self.push(at, EvKind::Exit(owner));
        }
    }

    fn wg_done(&mut self, pwg: usize, t: f64) -> Result<()> {
        self.world.now = Some(t);
        let out = self.state.apply(self.plan, Step::RunWg(pwg), &mut self.world)?;
        let mut t_end = t;
        if let Some(action) = out.trigger {
            let m = self.cfg.compute;
            match action.kind {
                TriggerKind::RemotePut | TriggerKind::PeerPut => {
                    for (q, cmd) in &out.posted {
                        t_end += m.api_overhead;
                        let link = self.cfg.cluster.link_between(cmd.source_gpu, cmd.dest_gpu)?;
                        let qp = &mut self.qps[*q];
                        qp.poll_cq(t_end);
                        let d = qp.post_and_ring_via(self.seq, cmd.bytes, link, t_end);
                        self.cq_depth_max = self.cq_depth_max.max(qp.cq_len());
                        if *q % 2 == 1 {
                            self.p2p_bytes += cmd.bytes;
                        }
                        // commands of one channel land in posting order
                        let at = d.deliver_at.max(self.last_delivery[*q]);
                        self.last_delivery[*q] = at;
                        self.push(at, EvKind::Deliver(*q));
                    }
                }
                TriggerKind::SetFlag => self.flag_set(action.slice_ix, t_end),
                TriggerKind::LocalCopy => {
                    let info = &self.plan.map.slices[action.slice_ix];
                    t_end += m.store_time(info.payload_bytes(self.cfg.problem.embedding_dim));
                    self.flag_set(action.slice_ix, t_end);
                }
            }
            if t_end > t {
                self.workers[pwg].intervals.push(Interval {
                    start: t,
                    end: t_end,
                    activity: Activity::Trigger {
                        slice: action.slice_ix,
                    },
                });
            }
        }
        self.start_next(pwg, t_end);
        Ok(())
    }

    fn deliver(&mut self, q: usize, t: f64) -> Result<()> {
        self.world.now = Some(t);
        let out = self.state.apply(self.plan, Step::Deliver { queue: q, pos: 0 }, &mut self.world)?;
        let (cmd, slice) = out.delivered.expect("delivery outcome");
        if cmd.kind == PutKind::FlagSet {
            self.flag_set(slice, t);
        }
        Ok(())
    }

    fn exit(&mut self, pwg: usize, t: f64) -> Result<()> {
        self.world.now = Some(t);
        self.state.apply(self.plan, Step::Exit(pwg), &mut self.world)?;
        self.draining[pwg] = false;
        self.exit_at[pwg] = t;
        let start = self.loop_end[pwg];
        self.workers[pwg].intervals.push(Interval {
            start,
            end: t,
            activity: Activity::Drain,
        });
        Ok(())
    }
}

/// Times the fused operator on `cfg`.
pub fn simulate_fused(cfg: &SimConfig, opts: FusedOptions<'_>) -> Result<Timeline> {
    let plan = cfg.plan()?;
    simulate_fused_plan(cfg, &plan, opts)
}

/// Times the fused operator with an explicit plan (e.g. custom schedules).
pub fn simulate_fused_plan(cfg: &SimConfig, plan: &FusedPlan, opts: FusedOptions<'_>) -> Result<Timeline> {
    cfg.validate()?;
    if let Some(d) = opts.payload {
        d.validate(&cfg.problem)?;
    }
    let n = cfg.cluster.num_gpus();
    let npwg = plan.num_pwgs();
    let mut qps = Vec::with_capacity(2 * n);
    for rank in 0..n {
        let gpu = cfg.cluster.gpu(rank);
        let nic = LinkParams {
            bandwidth: cfg.cluster.nic_link.bandwidth,
            per_message_overhead: cfg.cluster.nic_link.per_message_overhead,
            latency: cfg.cluster.nic_link.latency,
            hops: 1,
        };
        let p2p = cfg.cluster.p2p_link.map_or(nic, |l| LinkParams {
            bandwidth: l.bandwidth,
            per_message_overhead: 0.0,
            latency: l.latency,
            hops: 1,
        });
        debug_assert_eq!(FusedPlan::queue_index(rank, Channel::Nic), qps.len());
        qps.push(QueuePair::new(gpu, nic));
        qps.push(QueuePair::new(gpu, p2p));
    }
    let mut sim = FusedSim {
        cfg,
        plan,
        state: ProtocolState::new(plan),
        world: DataWorld::with_options(plan, opts.payload, opts.record_events),
        heap: BinaryHeap::new(),
        seq: 0,
        next: vec![0; npwg],
        active: plan.schedules.iter().map(|s| s.num_persistent_wgs()).collect(),
        loop_end: vec![0.0; npwg],
        outstanding: (0..npwg).map(|p| plan.drain_set(p).len()).collect(),
        draining: vec![false; npwg],
        exit_at: vec![0.0; npwg],
        qps,
        last_delivery: vec![0.0; 2 * n],
        workers: (0..npwg)
            .map(|p| {
                let (gpu, worker) = plan.pwg_location(p);
                WorkerTimeline {
                    gpu,
                    worker,
                    intervals: Vec::new(),
                }
            })
            .collect(),
        p2p_bytes: 0,
        cq_depth_max: 0,
    };
    let t0 = cfg.compute.kernel_launch;
    for p in 0..npwg {
        sim.start_next(p, t0);
    }
    while let Some(ev) = sim.heap.pop() {
        match ev.kind {
            EvKind::WgDone(p) => sim.wg_done(p, ev.t)?,
            EvKind::Deliver(q) => sim.deliver(q, ev.t)?,
            EvKind::Exit(p) => sim.exit(p, ev.t)?,
        }
    }
    if !sim.state.is_terminal() {
        return Err(ProtocolError::Deadlock(sim.state.deadlock_report(plan)).into());
    }
    let mut gpu_completion = vec![t0; n];
    for (p, &t) in sim.exit_at.iter().enumerate() {
        let (rank, _) = plan.pwg_location(p);
        gpu_completion[rank] = gpu_completion[rank].max(t);
    }
    let phases = gpu_completion
        .iter()
        .enumerate()
        .map(|(gpu, &end)| Phase {
            name: "fused_kernel".into(),
            gpu,
            start: 0.0,
            end,
        })
        .collect();
    let stats = sim.world.stats;
    let counters = Counters {
        messages: stats.network_messages,
        bytes: stats.network_bytes,
        p2p_bytes: sim.p2p_bytes + stats.peer_store_bytes,
        intermediate_bytes: stats.intermediate_bytes,
        cq_depth_max: sim.cq_depth_max,
    };
    let outputs = opts.payload.map(|_| std::mem::take(&mut sim.world.outputs));
    Ok(Timeline {
        mode: SimMode::Fused,
        node_completion: node_completion(&cfg.cluster, &gpu_completion),
        gpu_completion,
        workers: sim.workers,
        phases,
        counters,
        log: std::mem::take(&mut sim.world.log),
        outputs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    free: f64,
    slot: usize,
}

impl Eq for Slot {}

impl Ord for Slot {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        other.free.total_cmp(&self.free).then(other.slot.cmp(&self.slot))
    }
}

impl PartialOrd for Slot {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

/// Times the bulk-synchronous baseline: one embedding kernel per table writing
/// to an intermediate buffer, then the All-to-All, then the copy kernel that
/// writes the interaction layout.
pub fn simulate_baseline(cfg: &SimConfig) -> Result<Timeline> {
    cfg.validate()?;
    let p = &cfg.problem;
    let m = &cfg.compute;
    let n = cfg.cluster.num_gpus();
    let slots = cfg.occupancy.max_concurrent_wgs;
    let vpw = cfg.vectors_per_wg.max(1);
    let n_wg = p.global_batch.div_ceil(vpw);
    let mut workers = Vec::new();
    let mut phases = Vec::new();
    let mut compute_end = vec![0.0f64; n];
    for rank in 0..n {
        let base = workers.len();
        workers.extend((0..slots.min(n_wg)).map(|worker| WorkerTimeline {
            gpu: rank,
            worker,
            intervals: Vec::new(),
        }));
        let mut t = 0.0f64;
        let mut wg_id = 0;
        for _table in 0..p.tables_per_gpu {
            t += m.kernel_launch;
            let mut heap: BinaryHeap<Slot> = (0..slots.min(n_wg)).map(|slot| Slot { free: t, slot }).collect();
            let mut end = t;
            for i in 0..n_wg {
                let rows = i * vpw..((i + 1) * vpw).min(p.global_batch);
                let concurrent = slots.min(n_wg - (i / slots) * slots);
                let factor = m.contention(concurrent);
                let compute = m.wg_work(pooled_elements(p, rows.clone())) * factor;
                let store = m.store_time((rows.len() * p.embedding_dim) as u64 * ELEMENT_BYTES);
                let Slot { free, slot } = heap.pop().expect("at least one slot");
                let ivs = &mut workers[base + slot].intervals;
                ivs.push(Interval {
                    start: free,
                    end: free + compute,
                    activity: Activity::Compute { wg: wg_id, contention: factor },
                });
                ivs.push(Interval {
                    start: free + compute,
                    end: free + compute + store,
                    activity: Activity::Store { wg: wg_id },
                });
                wg_id += 1;
                let done = free + compute + store;
                end = end.max(done);
                heap.push(Slot { free: done, slot });
            }
            t = end;
        }
        compute_end[rank] = t;
        phases.push(Phase {
            name: "embedding_kernels".into(),
            gpu: rank,
            start: 0.0,
            end: t,
        });
    }
    let start = compute_end.iter().copied().fold(0.0, f64::max);
    let bytes_per_pair = (p.tables_per_gpu * p.local_batch() * p.embedding_dim) as u64 * ELEMENT_BYTES;
    let a2a = all_to_all(
        &cfg.cluster,
        &vec![start; n],
        bytes_per_pair,
        cfg.max_message_size,
        m.local_store_bw,
    )?;
    let mut gpu_completion = Vec::with_capacity(n);
    for rank in 0..n {
        let done = a2a.completion[rank];
        phases.push(Phase {
            name: "all_to_all".into(),
            gpu: rank,
            start,
            end: done,
        });
        phases.push(Phase {
            name: "copy_kernel".into(),
            gpu: rank,
            start: done,
            end: done + m.kernel_launch,
        });
        gpu_completion.push(done + m.kernel_launch);
    }
    let counters = Counters {
        messages: a2a.nic_messages,
        bytes: a2a.nic_bytes,
        p2p_bytes: a2a.p2p_bytes,
        intermediate_bytes: p.produced_bytes_per_gpu() * n as u64,
        cq_depth_max: a2a.max_depth,
    };
    Ok(Timeline {
        mode: SimMode::Baseline,
        node_completion: node_completion(&cfg.cluster, &gpu_completion),
        gpu_completion,
        workers,
        phases,
        counters,
        log: EventLog::default(),
        outputs: None,
    })
}

#[cfg(test)]
mod tests;
