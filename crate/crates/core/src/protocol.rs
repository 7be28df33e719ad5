//! Synchronization protocol of the fused embedding + All-to-All operator.
//!
//! Each logical WG ORs its bit into its slice's `WG_Done` word. The WG whose
//! OR fills the mask is the last finisher and triggers the slice: for a
//! remote slice it posts the payload PUT, a fence, and a PUT that sets the
//! destination's `sliceRdy` flag; for a slice already stored in place it sets
//! the flag directly. After its task loop a persistent WG polls its share of
//! the flags of its own GPU and exits once they are all set.
//!
//! Three executors share this logic:
//! - [`ProtocolState`], a hashable model stepped one action at a time, used by
//!   the seeded functional executor, the interleaving explorer and the timing
//!   simulator;
//! - [`SliceSyncState`], the lock-free atomic state used by the concurrent
//!   executor with one OS thread per persistent WG and per NIC channel.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    shuffled_oracle, EmbeddingData, EmbeddingProblem, LogicalWg, Route, SliceId, SliceInfo, SliceMap, ValueMode,
};
use crate::error::{DeadlockReport, ProtocolError, Result};
use crate::scheduler::{build_schedules, check_schedule, Policy, Schedule};
use crate::topology::{ClusterSpec, GpuId};

/// Size of one `sliceRdy` flag write.
pub const FLAG_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PutKind {
    Payload,
    FlagSet,
}

/// One command posted to a GPU's outbound queue.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PutCommand {
    pub kind: PutKind,
    pub source_gpu: GpuId,
    pub dest_gpu: GpuId,
    pub bytes: u64,
    pub slice: SliceId,
    /// Later commands on the channel may not overtake this one.
    pub fence_after: bool,
}

/// Outbound channel of a GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Queue pair to the NIC.
    Nic,
    /// Copy path over the peer link, used only when zero-copy is off.
    P2p,
}

impl Channel {
    fn index(self) -> usize {
        match self {
            Channel::Nic => 0,
            Channel::P2p => 1,
        }
    }
}

/// Where a logical WG writes its pooled rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    /// Straight into this GPU's own output buffer.
    LocalDirect,
    /// Straight into a peer GPU's output buffer.
    PeerDirect,
    /// Into a local buffer that something else copies later.
    Intermediate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    /// Payload + flag PUTs over the NIC.
    RemotePut,
    /// Payload + flag copies over the peer link (zero-copy off).
    PeerPut,
    /// Data already in place; set the destination flag.
    SetFlag,
    /// Copy the staged slice into the own output, then set the flag.
    LocalCopy,
}

/// What the last finisher of a slice has to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerAction {
    pub slice_ix: usize,
    pub slice: SliceId,
    pub kind: TriggerKind,
}

/// Injected protocol bugs, used to check that violations are caught.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Flag PUT posted before the payload PUT.
    FlagBeforePayload,
    /// Payload PUT without the fence, so the flag may overtake it.
    MissingFence,
    /// Flag PUT never posted.
    DropFlag,
}

impl std::str::FromStr for Fault {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "flag_before_payload" => Ok(Fault::FlagBeforePayload),
            "missing_fence" => Ok(Fault::MissingFence),
            "drop_flag" => Ok(Fault::DropFlag),
            other => crate::error::config_err(format!("unknown fault {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Single-threaded, seeded choice of the next runnable actor.
    Functional,
    /// One thread per persistent WG and per channel on shared atomics.
    Concurrent,
}

pub fn store_kind(route: Route, zero_copy: bool) -> StoreKind {
    match (route, zero_copy) {
        (Route::Local, true) => StoreKind::LocalDirect,
        (Route::Peer, true) => StoreKind::PeerDirect,
        _ => StoreKind::Intermediate,
    }
}

pub fn trigger_kind(route: Route, zero_copy: bool) -> TriggerKind {
    match (route, zero_copy) {
        (Route::Remote, _) => TriggerKind::RemotePut,
        (Route::Peer, false) => TriggerKind::PeerPut,
        (Route::Local, false) => TriggerKind::LocalCopy,
        (_, true) => TriggerKind::SetFlag,
    }
}

/// Store target of a WG whose slice stays on its node.
pub fn store_local_or_peer(slice: &SliceInfo, zero_copy: bool) -> Result<StoreKind, ProtocolError> {
    if slice.is_remote() {
        return Err(ProtocolError::NotRemote {
            slice: usize::MAX,
        });
    }
    Ok(store_kind(slice.route, zero_copy))
}

/// Folds a completion into a `WG_Done` value; returns the new mask and
/// whether this completion filled it.
pub fn record_completion(prev: u64, bit: u32, full: u64, slice: usize, wg: usize) -> Result<(u64, bool), ProtocolError> {
    let b = 1u64 << bit;
    if prev & b != 0 {
        return Err(ProtocolError::DoubleCompletion { slice, wg });
    }
    let now = prev | b;
    Ok((now, now == full && prev != full))
}

/// The PUT sequence a last finisher posts for a slice that has to be copied.
pub fn emit_remote_slice(
    action: &TriggerAction,
    map: &SliceMap,
    fault: Option<Fault>,
) -> Result<Vec<PutCommand>, ProtocolError> {
    if !matches!(action.kind, TriggerKind::RemotePut | TriggerKind::PeerPut) {
        return Err(ProtocolError::NotRemote { slice: action.slice_ix });
    }
    let s = &map.slices[action.slice_ix];
    if s.rows.is_empty() {
        return Err(ProtocolError::EmptySlice { slice: action.slice_ix });
    }
    let payload = PutCommand {
        kind: PutKind::Payload,
        source_gpu: s.id.source_gpu,
        dest_gpu: s.dest,
        bytes: s.payload_bytes(map.embedding_dim),
        slice: s.id,
        fence_after: fault != Some(Fault::MissingFence),
    };
    let flag = PutCommand {
        kind: PutKind::FlagSet,
        bytes: FLAG_BYTES,
        fence_after: false,
        ..payload.clone()
    };
    Ok(match fault {
        Some(Fault::FlagBeforePayload) => vec![flag, payload],
        Some(Fault::DropFlag) => vec![payload],
        _ => vec![payload, flag],
    })
}

/// Flags of a GPU polled by persistent WG `pwg` before it exits (round-robin by flag index).
pub fn drain_subset(num_flags: usize, persistent_wgs: usize, pwg: usize) -> impl Iterator<Item = usize> {
    (pwg..num_flags).step_by(persistent_wgs.max(1))
}

/// Everything needed to run the fused operator.
#[derive(Debug, Clone)]
pub struct FusedPlan {
    pub problem: EmbeddingProblem,
    pub cluster: ClusterSpec,
    pub map: SliceMap,
    pub schedules: Vec<Schedule>,
    pub zero_copy: bool,
    pub fault: Option<Fault>,
    /// Global index of persistent WG 0 of each GPU.
    pwg_offsets: Vec<usize>,
    /// Per global persistent WG: slices whose flags it polls.
    drain_sets: Vec<Vec<usize>>,
}

impl FusedPlan {
    pub fn new(
        problem: &EmbeddingProblem,
        cluster: &ClusterSpec,
        slice_size: usize,
        vectors_per_wg: usize,
        persistent_wgs: usize,
        policy: Policy,
    ) -> Result<Self> {
        cluster.validate()?;
        let map = SliceMap::build(problem, cluster, slice_size, vectors_per_wg)?;
        let schedules = build_schedules(&map, persistent_wgs, policy)?;
        Self::with_schedules(problem, cluster, map, schedules)
    }

    /// Plan with caller-provided schedules (any valid permutation).
    pub fn with_schedules(
        problem: &EmbeddingProblem,
        cluster: &ClusterSpec,
        map: SliceMap,
        schedules: Vec<Schedule>,
    ) -> Result<Self> {
        if schedules.len() != map.num_gpus {
            return crate::error::config_err("one schedule per GPU is required");
        }
        let mut pwg_offsets = Vec::with_capacity(schedules.len());
        let mut drain_sets = Vec::new();
        for (rank, s) in schedules.iter().enumerate() {
            if s.gpu_rank != rank {
                return crate::error::config_err("schedules must be ordered by GPU rank");
            }
            check_schedule(&map, s)?;
            pwg_offsets.push(drain_sets.len());
            let p = s.num_persistent_wgs();
            for pwg in 0..p {
                drain_sets.push(
                    drain_subset(map.flags_per_gpu(), p, pwg)
                        .map(|f| map.slice_of_flag(rank, f))
                        .collect(),
                );
            }
        }
        Ok(Self {
            problem: problem.clone(),
            cluster: cluster.clone(),
            map,
            schedules,
            zero_copy: true,
            fault: None,
            pwg_offsets,
            drain_sets,
        })
    }

    pub fn with_zero_copy(mut self, on: bool) -> Self {
        self.zero_copy = on;
        self
    }

    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn num_pwgs(&self) -> usize {
        self.drain_sets.len()
    }

    /// (GPU rank, local persistent WG index) of a global persistent WG.
    pub fn pwg_location(&self, pwg: usize) -> (usize, usize) {
        let rank = self.pwg_offsets.partition_point(|&o| o <= pwg) - 1;
        (rank, pwg - self.pwg_offsets[rank])
    }

    pub fn pwg_index(&self, rank: usize, local: usize) -> usize {
        self.pwg_offsets[rank] + local
    }

    pub fn task_list(&self, pwg: usize) -> &[usize] {
        let (rank, local) = self.pwg_location(pwg);
        &self.schedules[rank].lists[local]
    }

    pub fn drain_set(&self, pwg: usize) -> &[usize] {
        &self.drain_sets[pwg]
    }

    pub fn queue_index(rank: usize, channel: Channel) -> usize {
        rank * 2 + channel.index()
    }

    pub fn channel_for(kind: TriggerKind) -> Channel {
        if kind == TriggerKind::PeerPut {
            Channel::P2p
        } else {
            Channel::Nic
        }
    }

    pub fn trigger_kind(&self, slice_ix: usize) -> TriggerKind {
        trigger_kind(self.map.slices[slice_ix].route, self.zero_copy)
    }

    pub fn store_kind(&self, slice_ix: usize) -> StoreKind {
        store_kind(self.map.slices[slice_ix].route, self.zero_copy)
    }
}

/// A protocol action recorded by an executor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    WgComplete,
    Trigger,
    PutPosted,
    PayloadDelivered,
    FlagSet,
    LocalCopy,
    DrainExit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    pub actor: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<usize>,
    pub bytes: u64,
}

/// Causally ordered record of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, time: Option<f64>, actor: String, action: Action, slice: Option<usize>, bytes: u64) {
        let seq = self.events.len() as u64;
        self.events.push(Event {
            seq,
            time,
            actor,
            action,
            slice,
            bytes,
        });
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { events })
    }

    pub fn count(&self, action: Action) -> usize {
        self.events.iter().filter(|e| e.action == action).count()
    }

    /// Triggers per global slice.
    pub fn trigger_counts(&self, num_slices: usize) -> Vec<u32> {
        let mut c = vec![0; num_slices];
        for e in &self.events {
            if let (Action::Trigger, Some(s)) = (e.action, e.slice) {
                c[s] += 1;
            }
        }
        c
    }

    /// Flag sets that are not preceded by the slice's data becoming visible:
    /// its delivered payload for copied slices, all its WG completions otherwise.
    pub fn fence_violations(&self, plan: &FusedPlan) -> Vec<ProtocolError> {
        let n = plan.map.slices.len();
        let mut completions = vec![0usize; n];
        let mut delivered = vec![false; n];
        let mut out = Vec::new();
        for e in &self.events {
            let Some(s) = e.slice else { continue };
            match e.action {
                Action::WgComplete => completions[s] += 1,
                Action::PayloadDelivered | Action::LocalCopy => delivered[s] = true,
                Action::FlagSet => {
                    let ok = match plan.trigger_kind(s) {
                        TriggerKind::SetFlag => completions[s] == plan.map.slices[s].wg_count(),
                        _ => delivered[s],
                    };
                    if !ok {
                        out.push(ProtocolError::FenceViolation {
                            slice: s,
                            dest: plan.map.slices[s].dest_rank,
                        });
                    }
                }
                _ => {}
            }
        }
        out
    }
}

/// Side effects of protocol steps on data; the explorer ignores them.
pub trait Effects {
    fn compute(&mut self, _pwg: usize, _wg: &LogicalWg, _store: StoreKind) {}
    fn deliver(&mut self, _cmd: &PutCommand, _slice_ix: usize) {}
    fn local_copy(&mut self, _slice_ix: usize) {}
    fn event(&mut self, _actor: Actor, _action: Action, _slice: Option<usize>, _bytes: u64) {}
}

/// No data, no log.
pub struct NoEffects;
impl Effects for NoEffects {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Actor {
    Pwg { rank: usize, local: usize },
    Channel { rank: usize, channel: Channel },
}

impl std::fmt::Display for Actor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Actor::Pwg { rank, local } => write!(f, "gpu{rank}/pwg{local}"),
            Actor::Channel { rank, channel: Channel::Nic } => write!(f, "gpu{rank}/nic"),
            Actor::Channel { rank, channel: Channel::P2p } => write!(f, "gpu{rank}/p2p"),
        }
    }
}

/// One atomic step of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    /// Persistent WG runs its next logical WG to completion.
    RunWg(usize),
    /// Channel `queue` completes its `pos`-th pending command.
    Deliver { queue: usize, pos: usize },
    /// Persistent WG leaves after its drain set is complete.
    Exit(usize),
}

/// What a step did, for drivers that need timing hooks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    pub wg: Option<usize>,
    pub trigger: Option<TriggerAction>,
    pub posted: Vec<(usize, PutCommand)>,
    pub delivered: Option<(PutCommand, usize)>,
}

/// Hashable protocol state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProtocolState {
    cursor: Vec<u32>,
    exited: Vec<bool>,
    queues: Vec<VecDeque<PutCommand>>,
    wg_done: Vec<u64>,
    triggers: Vec<u8>,
    payload_visible: Vec<bool>,
    flags: Vec<bool>,
}

impl ProtocolState {
    pub fn new(plan: &FusedPlan) -> Self {
        let n = plan.map.slices.len();
        Self {
            cursor: vec![0; plan.num_pwgs()],
            exited: vec![false; plan.num_pwgs()],
            queues: vec![VecDeque::new(); plan.map.num_gpus * 2],
            wg_done: vec![0; n],
            triggers: vec![0; n],
            payload_visible: vec![false; n],
            flags: vec![false; n],
        }
    }

    pub fn mask(&self, slice: usize) -> u64 {
        self.wg_done[slice]
    }

    pub fn flag(&self, slice: usize) -> bool {
        self.flags[slice]
    }

    pub fn queue(&self, q: usize) -> &VecDeque<PutCommand> {
        &self.queues[q]
    }

    pub fn loop_done(&self, plan: &FusedPlan, pwg: usize) -> bool {
        self.cursor[pwg] as usize >= plan.task_list(pwg).len()
    }

    pub fn drain_ready(&self, plan: &FusedPlan, pwg: usize) -> bool {
        plan.drain_set(pwg).iter().all(|&s| self.flags[s])
    }

    pub fn is_terminal(&self) -> bool {
        self.exited.iter().all(|&e| e) && self.queues.iter().all(VecDeque::is_empty)
    }

    pub fn triggers(&self) -> &[u8] {
        &self.triggers
    }

    /// Steps that may run next. A pending command is deliverable when no
    /// earlier pending command on its channel carries a fence.
    pub fn enabled(&self, plan: &FusedPlan, out: &mut Vec<Step>) {
        out.clear();
        for pwg in 0..self.cursor.len() {
            if self.exited[pwg] {
                continue;
            }
            if !self.loop_done(plan, pwg) {
                out.push(Step::RunWg(pwg));
            } else if self.drain_ready(plan, pwg) {
                out.push(Step::Exit(pwg));
            }
        }
        for (q, queue) in self.queues.iter().enumerate() {
            for (pos, cmd) in queue.iter().enumerate() {
                out.push(Step::Deliver { queue: q, pos });
                if cmd.fence_after {
                    break;
                }
            }
        }
    }

    pub fn apply<E: Effects>(&mut self, plan: &FusedPlan, step: Step, fx: &mut E) -> Result<StepOutcome, ProtocolError> {
        let mut out = StepOutcome::default();
        match step {
            Step::RunWg(pwg) => {
                let (rank, local) = plan.pwg_location(pwg);
                let actor = Actor::Pwg { rank, local };
                let wg_ix = plan.task_list(pwg)[self.cursor[pwg] as usize];
                self.cursor[pwg] += 1;
                let wg = &plan.map.wgs[wg_ix];
                let s = wg.slice_ix;
                let slice = &plan.map.slices[s];
                let store = plan.store_kind(s);
                fx.compute(pwg, wg, store);
                let (mask, last) = record_completion(self.wg_done[s], wg.bit, slice.full_mask(), s, wg_ix)?;
                self.wg_done[s] = mask;
                fx.event(actor, Action::WgComplete, Some(s), (wg.rows * plan.map.embedding_dim) as u64 * 4);
                out.wg = Some(wg_ix);
                if last {
                    self.triggers[s] += 1;
                    if self.triggers[s] > 1 {
                        return Err(ProtocolError::MultipleTriggers {
                            slice: s,
                            count: self.triggers[s] as u32,
                        });
                    }
                    let action = TriggerAction {
                        slice_ix: s,
                        slice: slice.id,
                        kind: plan.trigger_kind(s),
                    };
                    fx.event(actor, Action::Trigger, Some(s), 0);
                    match action.kind {
                        TriggerKind::RemotePut | TriggerKind::PeerPut => {
                            let q = FusedPlan::queue_index(rank, FusedPlan::channel_for(action.kind));
                            for cmd in emit_remote_slice(&action, &plan.map, plan.fault)? {
                                fx.event(actor, Action::PutPosted, Some(s), cmd.bytes);
                                self.queues[q].push_back(cmd.clone());
                                out.posted.push((q, cmd));
                            }
                        }
                        TriggerKind::SetFlag => {
                            self.payload_visible[s] = true;
                            self.flags[s] = true;
                            fx.event(actor, Action::FlagSet, Some(s), FLAG_BYTES);
                        }
                        TriggerKind::LocalCopy => {
                            fx.local_copy(s);
                            fx.event(actor, Action::LocalCopy, Some(s), slice.payload_bytes(plan.map.embedding_dim));
                            self.payload_visible[s] = true;
                            self.flags[s] = true;
                            fx.event(actor, Action::FlagSet, Some(s), FLAG_BYTES);
                        }
                    }
                    out.trigger = Some(action);
                }
            }
            Step::Deliver { queue, pos } => {
                let cmd = self.queues[queue].remove(pos).expect("deliverable position");
                let s = plan.map.index_of(&cmd.slice);
                let channel = if queue % 2 == 0 { Channel::Nic } else { Channel::P2p };
                let actor = Actor::Channel { rank: queue / 2, channel };
                match cmd.kind {
                    PutKind::Payload => {
                        fx.deliver(&cmd, s);
                        self.payload_visible[s] = true;
                        fx.event(actor, Action::PayloadDelivered, Some(s), cmd.bytes);
                    }
                    PutKind::FlagSet => {
                        fx.event(actor, Action::FlagSet, Some(s), cmd.bytes);
                        if !self.payload_visible[s] {
                            return Err(ProtocolError::FenceViolation {
                                slice: s,
                                dest: plan.map.slices[s].dest_rank,
                            });
                        }
                        self.flags[s] = true;
                    }
                }
                out.delivered = Some((cmd, s));
            }
            Step::Exit(pwg) => {
                debug_assert!(self.loop_done(plan, pwg) && self.drain_ready(plan, pwg));
                let (rank, local) = plan.pwg_location(pwg);
                self.exited[pwg] = true;
                fx.event(Actor::Pwg { rank, local }, Action::DrainExit, None, 0);
            }
        }
        Ok(out)
    }

    pub fn deadlock_report(&self, plan: &FusedPlan) -> DeadlockReport {
        let mut r = DeadlockReport::default();
        for (s, info) in plan.map.slices.iter().enumerate() {
            if !self.flags[s] {
                r.unset_flags.push((info.dest_rank, info.flag_index));
            }
            if self.wg_done[s] != info.full_mask() {
                r.unfull_masks.push((s, self.wg_done[s]));
            }
        }
        r.stuck_workers = (0..self.exited.len()).filter(|&p| !self.exited[p]).collect();
        r
    }
}

/// Counters of a fused run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub triggers: u64,
    /// Commands that crossed a NIC.
    pub network_messages: u64,
    pub network_bytes: u64,
    /// Bytes stored anywhere other than their final destination buffer.
    pub intermediate_bytes: u64,
    /// Bytes stored directly into a peer GPU.
    pub peer_store_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct FusedRun {
    /// Per GPU, row-major `local_batch x output_width`.
    pub outputs: Vec<Vec<f32>>,
    pub log: EventLog,
    pub stats: RunStats,
}

#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct FusedRunError {
    pub error: crate::Error,
    /// Events recorded up to the failure.
    pub log: EventLog,
}

impl FusedRunError {
    fn new(error: impl Into<crate::Error>, log: EventLog) -> Self {
        Self {
            error: error.into(),
            log,
        }
    }

    pub fn protocol(&self) -> Option<&ProtocolError> {
        match &self.error {
            crate::Error::Protocol(e) => Some(e),
            _ => None,
        }
    }
}

impl FusedRun {
    /// Exact comparison in integer mode, 1e-6 relative otherwise.
    pub fn check_against(&self, expected: &[Vec<f32>], mode: ValueMode) -> Result<(), ProtocolError> {
        compare_outputs(&self.outputs, expected, mode)
    }
}

pub fn compare_outputs(got: &[Vec<f32>], expected: &[Vec<f32>], mode: ValueMode) -> Result<(), ProtocolError> {
    for (gpu, (g, e)) in got.iter().zip(expected).enumerate() {
        for (index, (&a, &b)) in g.iter().zip(e).enumerate() {
            let ok = match mode {
                ValueMode::ExactInt => a.to_bits() == b.to_bits(),
                ValueMode::Float32 => (a - b).abs() <= 1e-6 * b.abs().max(1e-30) || a == b,
            };
            if !ok {
                return Err(ProtocolError::OutputMismatch {
                    gpu,
                    index,
                    got: a,
                    expected: b,
                });
            }
        }
    }
    Ok(())
}

/// Data side of a single-threaded run: output buffers, staging buffers, log.
/// Without data only the counters (and optionally the log) are kept.
pub struct DataWorld<'a> {
    plan: &'a FusedPlan,
    data: Option<&'a EmbeddingData>,
    pub outputs: Vec<Vec<f32>>,
    staging: Vec<Vec<f32>>,
    scratch: Vec<f32>,
    record: bool,
    pub log: EventLog,
    pub stats: RunStats,
    /// Timestamp stamped on logged events.
    pub now: Option<f64>,
}

impl<'a> DataWorld<'a> {
    pub fn new(plan: &'a FusedPlan, data: &'a EmbeddingData) -> Self {
        Self::with_options(plan, Some(data), true)
    }

    pub fn with_options(plan: &'a FusedPlan, data: Option<&'a EmbeddingData>, record: bool) -> Self {
        let p = &plan.problem;
        let (outputs, staging) = if data.is_some() {
            let staged = p.tables_per_gpu * p.global_batch * p.embedding_dim;
            (vec![vec![0.0; p.output_len()]; p.num_gpus], vec![vec![0.0; staged]; p.num_gpus])
        } else {
            (Vec::new(), Vec::new())
        };
        Self {
            plan,
            data,
            outputs,
            staging,
            scratch: vec![0.0; p.embedding_dim],
            record,
            log: EventLog::default(),
            stats: RunStats::default(),
            now: None,
        }
    }

    fn copy_slice(&mut self, s: usize) {
        if self.data.is_none() {
            return;
        }
        let p = &self.plan.problem;
        let info = &self.plan.map.slices[s];
        let (d, width) = (p.embedding_dim, p.output_width());
        for (i, row) in info.rows.clone().enumerate() {
            let src = (info.id.table * p.global_batch + row) * d;
            let dst = (info.dest_row + i) * width + info.dest_col;
            let (from, to) = (&self.staging[info.source_rank], &mut self.outputs[info.dest_rank]);
            to[dst..dst + d].copy_from_slice(&from[src..src + d]);
        }
    }
}

impl Effects for DataWorld<'_> {
    fn compute(&mut self, _pwg: usize, wg: &LogicalWg, store: StoreKind) {
        let p = &self.plan.problem;
        let info = &self.plan.map.slices[wg.slice_ix];
        let src = info.source_rank;
        let g = p.global_table(src, wg.table);
        let (d, width) = (p.embedding_dim, p.output_width());
        let bytes = (wg.rows * d) as u64 * 4;
        let rows = if self.data.is_some() { wg.rows } else { 0 };
        for row in wg.out_row_start..wg.out_row_start + rows {
            self.data.unwrap().pool_into(p, g, row, &mut self.scratch);
            match store {
                StoreKind::LocalDirect | StoreKind::PeerDirect => {
                    let at = (info.dest_row + row - info.rows.start) * width + info.dest_col;
                    self.outputs[info.dest_rank][at..at + d].copy_from_slice(&self.scratch);
                }
                StoreKind::Intermediate => {
                    let at = (wg.table * p.global_batch + row) * d;
                    self.staging[src][at..at + d].copy_from_slice(&self.scratch);
                }
            }
        }
        match store {
            StoreKind::Intermediate => self.stats.intermediate_bytes += bytes,
            StoreKind::PeerDirect => self.stats.peer_store_bytes += bytes,
            StoreKind::LocalDirect => {}
        }
    }

    fn deliver(&mut self, cmd: &PutCommand, s: usize) {
        if cmd.kind == PutKind::Payload {
            self.copy_slice(s);
        }
    }

    fn local_copy(&mut self, s: usize) {
        self.copy_slice(s);
    }

    fn event(&mut self, actor: Actor, action: Action, slice: Option<usize>, bytes: u64) {
        match (action, actor) {
            (Action::Trigger, _) => self.stats.triggers += 1,
            (Action::PutPosted, _) => {
                let s = slice.expect("put carries a slice");
                if self.plan.map.slices[s].route == Route::Remote {
                    self.stats.network_messages += 1;
                    self.stats.network_bytes += bytes;
                }
            }
            _ => {}
        }
        if self.record {
            self.log.push(self.now, actor.to_string(), action, slice, bytes);
        }
    }
}

/// Runs the fused operator on real data.
///
/// In functional mode `seed` drives the choice of the next runnable actor; in
/// concurrent mode it is unused and the OS scheduler interleaves threads.
pub fn run_fused(plan: &FusedPlan, data: &EmbeddingData, mode: ExecMode, seed: u64) -> Result<FusedRun, FusedRunError> {
    match mode {
        ExecMode::Functional => run_functional(plan, data, seed),
        ExecMode::Concurrent => run_concurrent(plan, data, Duration::from_secs(10)),
    }
}

fn run_functional(plan: &FusedPlan, data: &EmbeddingData, seed: u64) -> Result<FusedRun, FusedRunError> {
    data.validate(&plan.problem)
        .map_err(|e| FusedRunError::new(e, EventLog::default()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ProtocolState::new(plan);
    let mut world = DataWorld::new(plan, data);
    let mut steps = Vec::new();
    loop {
        state.enabled(plan, &mut steps);
        if steps.is_empty() {
            if state.is_terminal() {
                break;
            }
            return Err(FusedRunError::new(
                ProtocolError::Deadlock(state.deadlock_report(plan)),
                world.log,
            ));
        }
        let step = steps[rng.gen_range(0..steps.len())];
        if let Err(error) = state.apply(plan, step, &mut world) {
            return Err(FusedRunError::new(error, world.log));
        }
    }
    Ok(FusedRun {
        outputs: world.outputs,
        log: world.log,
        stats: world.stats,
    })
}

/// Lock-free `WG_Done` words and `sliceRdy` flags shared by concurrent workers.
#[derive(Debug)]
pub struct SliceSyncState {
    wg_done: Vec<AtomicU64>,
    /// `slice_rdy[gpu][flag_index]`
    slice_rdy: Vec<Vec<AtomicBool>>,
}

impl SliceSyncState {
    pub fn new(map: &SliceMap) -> Self {
        Self {
            wg_done: (0..map.slices.len()).map(|_| AtomicU64::new(0)).collect(),
            slice_rdy: (0..map.num_gpus)
                .map(|_| (0..map.flags_per_gpu()).map(|_| AtomicBool::new(false)).collect())
                .collect(),
        }
    }

    /// Records a logical WG's completion; returns the trigger iff this
    /// completion filled the slice's mask.
    pub fn complete_logical_wg(
        &self,
        map: &SliceMap,
        wg: &LogicalWg,
        zero_copy: bool,
    ) -> Result<Option<TriggerAction>, ProtocolError> {
        let s = wg.slice_ix;
        let info = &map.slices[s];
        let prev = self.wg_done[s].fetch_or(1 << wg.bit, Ordering::AcqRel);
        let (_, last) = record_completion(prev, wg.bit, info.full_mask(), s, wg.id)?;
        Ok(last.then(|| TriggerAction {
            slice_ix: s,
            slice: info.id,
            kind: trigger_kind(info.route, zero_copy),
        }))
    }

    pub fn mask(&self, slice: usize) -> u64 {
        self.wg_done[slice].load(Ordering::Acquire)
    }

    pub fn set_flag(&self, gpu: usize, flag: usize) {
        self.slice_rdy[gpu][flag].store(true, Ordering::Release);
    }

    pub fn flag(&self, gpu: usize, flag: usize) -> bool {
        self.slice_rdy[gpu][flag].load(Ordering::Acquire)
    }

    /// Blocks until every flag of `gpu` in persistent WG `pwg`'s subset is set.
    /// `observed` runs once per flag right after it is seen set.
    pub fn drain_exit(
        &self,
        map: &SliceMap,
        gpu: usize,
        pwg: usize,
        persistent_wgs: usize,
        timeout: Duration,
        mut observed: impl FnMut(usize) -> Result<(), ProtocolError>,
    ) -> Result<(), ProtocolError> {
        let deadline = Instant::now() + timeout;
        let mut spins = 0u32;
        for f in drain_subset(map.flags_per_gpu(), persistent_wgs, pwg) {
            while !self.flag(gpu, f) {
                if Instant::now() > deadline {
                    return Err(ProtocolError::Deadlock(self.report(map)));
                }
                spins = spins.wrapping_add(1);
                if spins.is_multiple_of(64) {
                    std::thread::yield_now();
                } else {
                    std::hint::spin_loop();
                }
            }
            observed(f)?;
        }
        Ok(())
    }

    pub fn report(&self, map: &SliceMap) -> DeadlockReport {
        let mut r = DeadlockReport::default();
        for (s, info) in map.slices.iter().enumerate() {
            if !self.flag(info.dest_rank, info.flag_index) {
                r.unset_flags.push((info.dest_rank, info.flag_index));
            }
            let m = self.mask(s);
            if m != info.full_mask() {
                r.unfull_masks.push((s, m));
            }
        }
        r
    }
}

fn load_f32(a: &AtomicU32) -> f32 {
    f32::from_bits(a.load(Ordering::Relaxed))
}

fn store_f32(a: &AtomicU32, v: f32) {
    a.store(v.to_bits(), Ordering::Relaxed)
}

fn atomic_buf(len: usize) -> Vec<AtomicU32> {
    (0..len).map(|_| AtomicU32::new(0)).collect()
}

struct Shared<'a> {
    plan: &'a FusedPlan,
    data: &'a EmbeddingData,
    expected: Vec<Vec<f32>>,
    outputs: Vec<Vec<AtomicU32>>,
    staging: Vec<Vec<AtomicU32>>,
    sync: SliceSyncState,
    triggers: Vec<AtomicU32>,
    seq: AtomicU64,
    stats: [AtomicU64; 5],
}

impl Shared<'_> {
    fn log(&self, local: &mut Vec<Event>, actor: Actor, action: Action, slice: Option<usize>, bytes: u64) {
        local.push(Event {
            seq: self.seq.fetch_add(1, Ordering::SeqCst),
            time: None,
            actor: actor.to_string(),
            action,
            slice,
            bytes,
        });
    }

    fn copy_slice(&self, s: usize) {
        let p = &self.plan.problem;
        let info = &self.plan.map.slices[s];
        let (d, width) = (p.embedding_dim, p.output_width());
        for (i, row) in info.rows.clone().enumerate() {
            let src = (info.id.table * p.global_batch + row) * d;
            let dst = (info.dest_row + i) * width + info.dest_col;
            for j in 0..d {
                store_f32(
                    &self.outputs[info.dest_rank][dst + j],
                    load_f32(&self.staging[info.source_rank][src + j]),
                );
            }
        }
    }

    /// Reads a slice at its destination and compares it with the oracle.
    fn check_slice(&self, s: usize) -> Result<(), ProtocolError> {
        let p = &self.plan.problem;
        let info = &self.plan.map.slices[s];
        let (d, width) = (p.embedding_dim, p.output_width());
        for i in 0..info.rows.len() {
            let at = (info.dest_row + i) * width + info.dest_col;
            for j in 0..d {
                let got = load_f32(&self.outputs[info.dest_rank][at + j]);
                let want = self.expected[info.dest_rank][at + j];
                if got.to_bits() != want.to_bits() {
                    return Err(ProtocolError::FenceViolation {
                        slice: s,
                        dest: info.dest_rank,
                    });
                }
            }
        }
        Ok(())
    }
}

const ST_TRIGGERS: usize = 0;
const ST_MSGS: usize = 1;
const ST_NET_BYTES: usize = 2;
const ST_INTERMEDIATE: usize = 3;
const ST_PEER: usize = 4;

fn run_concurrent(plan: &FusedPlan, data: &EmbeddingData, timeout: Duration) -> Result<FusedRun, FusedRunError> {
    let p = &plan.problem;
    let expected = shuffled_oracle(p, data).map_err(|e| FusedRunError::new(e, EventLog::default()))?;
    let shared = Shared {
        plan,
        data,
        expected,
        outputs: (0..p.num_gpus).map(|_| atomic_buf(p.output_len())).collect(),
        staging: (0..p.num_gpus)
            .map(|_| atomic_buf(p.tables_per_gpu * p.global_batch * p.embedding_dim))
            .collect(),
        sync: SliceSyncState::new(&plan.map),
        triggers: (0..plan.map.slices.len()).map(|_| AtomicU32::new(0)).collect(),
        seq: AtomicU64::new(0),
        stats: Default::default(),
    };
    let sh = &shared;

    let results: Vec<(Vec<Event>, Result<(), ProtocolError>)> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for rank in 0..p.num_gpus {
            let mut senders = Vec::new();
            for channel in [Channel::Nic, Channel::P2p] {
                let (tx, rx) = mpsc::channel::<PutCommand>();
                senders.push(tx);
                handles.push(scope.spawn(move || {
                    let actor = Actor::Channel { rank, channel };
                    let mut log = Vec::new();
                    for cmd in rx {
                        let s = sh.plan.map.index_of(&cmd.slice);
                        let info = &sh.plan.map.slices[s];
                        match cmd.kind {
                            PutKind::Payload => {
                                sh.copy_slice(s);
                                sh.log(&mut log, actor, Action::PayloadDelivered, Some(s), cmd.bytes);
                            }
                            PutKind::FlagSet => {
                                sh.sync.set_flag(info.dest_rank, info.flag_index);
                                sh.log(&mut log, actor, Action::FlagSet, Some(s), cmd.bytes);
                            }
                        }
                    }
                    (log, Ok(()))
                }));
            }
            let sched = &plan.schedules[rank];
            let persistent = sched.num_persistent_wgs();
            for local in 0..persistent {
                let tx: Vec<_> = senders.to_vec();
                handles.push(scope.spawn(move || {
                    let mut log = Vec::new();
                    let r = pwg_body(sh, rank, local, persistent, tx, timeout, &mut log);
                    (log, r)
                }));
            }
            drop(senders);
        }
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });

    let mut events: Vec<Event> = Vec::new();
    let mut first_err = None;
    for (log, r) in results {
        events.extend(log);
        if let Err(e) = r {
            first_err.get_or_insert(e);
        }
    }
    events.sort_by_key(|e| e.seq);
    let log = EventLog { events };
    if let Some(error) = first_err {
        return Err(FusedRunError::new(error, log));
    }
    for (s, t) in shared.triggers.iter().enumerate() {
        let count = t.load(Ordering::Relaxed);
        if count != 1 {
            return Err(FusedRunError::new(ProtocolError::MultipleTriggers { slice: s, count }, log));
        }
    }
    let stats = RunStats {
        triggers: shared.stats[ST_TRIGGERS].load(Ordering::Relaxed),
        network_messages: shared.stats[ST_MSGS].load(Ordering::Relaxed),
        network_bytes: shared.stats[ST_NET_BYTES].load(Ordering::Relaxed),
        intermediate_bytes: shared.stats[ST_INTERMEDIATE].load(Ordering::Relaxed),
        peer_store_bytes: shared.stats[ST_PEER].load(Ordering::Relaxed),
    };
    let outputs = shared
        .outputs
        .iter()
        .map(|buf| buf.iter().map(load_f32).collect())
        .collect();
    Ok(FusedRun { outputs, log, stats })
}

fn pwg_body(
    sh: &Shared<'_>,
    rank: usize,
    local: usize,
    persistent: usize,
    tx: Vec<mpsc::Sender<PutCommand>>,
    timeout: Duration,
    log: &mut Vec<Event>,
) -> Result<(), ProtocolError> {
    let plan = sh.plan;
    let p = &plan.problem;
    let map = &plan.map;
    let actor = Actor::Pwg { rank, local };
    let (d, width) = (p.embedding_dim, p.output_width());
    let mut scratch = vec![0.0f32; d];
    for &wg_ix in &plan.schedules[rank].lists[local] {
        let wg = &map.wgs[wg_ix];
        let s = wg.slice_ix;
        let info = &map.slices[s];
        let store = plan.store_kind(s);
        let g = p.global_table(rank, wg.table);
        for row in wg.out_row_start..wg.out_row_start + wg.rows {
            sh.data.pool_into(p, g, row, &mut scratch);
            let (buf, at) = match store {
                StoreKind::Intermediate => (&sh.staging[rank], (wg.table * p.global_batch + row) * d),
                _ => (
                    &sh.outputs[info.dest_rank],
                    (info.dest_row + row - info.rows.start) * width + info.dest_col,
                ),
            };
            for (j, v) in scratch.iter().enumerate() {
                store_f32(&buf[at + j], *v);
            }
        }
        let bytes = (wg.rows * d) as u64 * 4;
        match store {
            StoreKind::Intermediate => sh.stats[ST_INTERMEDIATE].fetch_add(bytes, Ordering::Relaxed),
            StoreKind::PeerDirect => sh.stats[ST_PEER].fetch_add(bytes, Ordering::Relaxed),
            StoreKind::LocalDirect => 0,
        };
        let trig = sh.sync.complete_logical_wg(map, wg, plan.zero_copy)?;
        sh.log(log, actor, Action::WgComplete, Some(s), bytes);
        let Some(action) = trig else { continue };
        sh.triggers[s].fetch_add(1, Ordering::Relaxed);
        sh.stats[ST_TRIGGERS].fetch_add(1, Ordering::Relaxed);
        sh.log(log, actor, Action::Trigger, Some(s), 0);
        match action.kind {
            TriggerKind::RemotePut | TriggerKind::PeerPut => {
                let ch = FusedPlan::channel_for(action.kind).index();
                for cmd in emit_remote_slice(&action, map, plan.fault)? {
                    if info.route == Route::Remote {
                        sh.stats[ST_MSGS].fetch_add(1, Ordering::Relaxed);
                        sh.stats[ST_NET_BYTES].fetch_add(cmd.bytes, Ordering::Relaxed);
                    }
                    sh.log(log, actor, Action::PutPosted, Some(s), cmd.bytes);
                    tx[ch].send(cmd).expect("channel thread alive");
                }
            }
            TriggerKind::SetFlag => {
                sh.sync.set_flag(info.dest_rank, info.flag_index);
                sh.log(log, actor, Action::FlagSet, Some(s), FLAG_BYTES);
            }
            TriggerKind::LocalCopy => {
                sh.copy_slice(s);
                sh.log(log, actor, Action::LocalCopy, Some(s), info.payload_bytes(d));
                sh.sync.set_flag(info.dest_rank, info.flag_index);
                sh.log(log, actor, Action::FlagSet, Some(s), FLAG_BYTES);
            }
        }
    }
    // The task loop is exhausted; channels close once every worker of this GPU gets here.
    drop(tx);
    sh.sync.drain_exit(map, rank, local, persistent, timeout, |f| {
        sh.check_slice(map.slice_of_flag(rank, f))
    })?;
    sh.log(log, actor, Action::DrainExit, None, 0);
    Ok(())
}

/// Result of exhaustively exploring every interleaving of a plan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExplorationReport {
    /// Distinct reachable states.
    pub states: usize,
    /// Complete interleavings (saturating).
    pub interleavings: u128,
    /// Transitions that set a flag before its payload was visible.
    pub fence_violations: usize,
    /// Transitions that triggered an already triggered slice, plus terminal
    /// states with a slice not triggered exactly once.
    pub trigger_violations: usize,
    /// Non-terminal states with no enabled step.
    pub deadlocks: usize,
}

impl ExplorationReport {
    pub fn is_clean(&self) -> bool {
        self.fence_violations == 0 && self.trigger_violations == 0 && self.deadlocks == 0
    }
}

/// Visits every state reachable from the initial state under every order of
/// enabled steps. Fails with a configuration error past `max_states`.
pub fn explore_interleavings(plan: &FusedPlan, max_states: usize) -> Result<ExplorationReport> {
    let mut memo: HashMap<ProtocolState, u128> = HashMap::new();
    let mut report = ExplorationReport::default();
    let init = ProtocolState::new(plan);
    // explicit stack: (state, enabled steps, next step index, accumulated paths)
    let mut stack: Vec<(ProtocolState, Vec<Step>, usize, u128)> = Vec::new();
    let mut steps = Vec::new();
    init.enabled(plan, &mut steps);
    stack.push((init, steps.clone(), 0, 0));
    while let Some(top) = stack.last_mut() {
        let (state, enabled, next, acc) = top;
        if *next == enabled.len() {
            let paths = if enabled.is_empty() {
                if state.is_terminal() {
                    if state.triggers().iter().any(|&t| t != 1) {
                        report.trigger_violations += 1;
                        0
                    } else {
                        1
                    }
                } else {
                    report.deadlocks += 1;
                    0
                }
            } else {
                *acc
            };
            let (state, ..) = stack.pop().unwrap();
            memo.insert(state, paths);
            if let Some(parent) = stack.last_mut() {
                parent.3 = parent.3.saturating_add(paths);
            }
            continue;
        }
        let step = enabled[*next];
        *next += 1;
        let mut child = state.clone();
        match child.apply(plan, step, &mut NoEffects) {
            Ok(_) => {}
            Err(ProtocolError::FenceViolation { .. }) => {
                report.fence_violations += 1;
                continue;
            }
            Err(ProtocolError::MultipleTriggers { .. }) | Err(ProtocolError::DoubleCompletion { .. }) => {
                report.trigger_violations += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        if let Some(&paths) = memo.get(&child) {
            top.3 = top.3.saturating_add(paths);
            continue;
        }
        if memo.len() + stack.len() > max_states {
            return crate::error::config_err(format!("state space exceeds {max_states} states"));
        }
        child.enabled(plan, &mut steps);
        stack.push((child, steps.clone(), 0, 0));
    }
    report.states = memo.len();
    report.interleavings = memo[&ProtocolState::new(plan)];
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{PoolingMode, PoolingSize};
    use crate::topology::ClusterSpec;

    pub(crate) fn problem(n: usize, t: usize, batch: usize, d: usize) -> EmbeddingProblem {
        EmbeddingProblem {
            num_gpus: n,
            tables_per_gpu: t,
            global_batch: batch,
            embedding_dim: d,
            pooling: PoolingSize::Fixed(2),
            pooling_mode: PoolingMode::Sum,
            rows_per_table: 8,
            value_mode: ValueMode::ExactInt,
        }
    }

    pub(crate) fn nodes(n: usize) -> ClusterSpec {
        let mut c = ClusterSpec::inter_node_pair();
        c.num_nodes = n;
        c
    }

    fn toy_plan() -> FusedPlan {
        FusedPlan::new(&problem(2, 4, 4, 2), &nodes(2), 2, 1, 2, Policy::CommAware).unwrap()
    }

    fn wg_by_label(plan: &FusedPlan, rank: usize, row: usize, table: usize) -> &LogicalWg {
        plan.map.wgs[plan.map.gpu_wgs(rank)]
            .iter()
            .find(|w| w.out_row_start == row && w.table == table)
            .unwrap()
    }

    #[test]
    fn last_finisher_triggers() {
        let plan = toy_plan();
        let sync = SliceSyncState::new(&plan.map);
        let wg20 = wg_by_label(&plan, 0, 2, 0);
        let wg30 = wg_by_label(&plan, 0, 3, 0);
        assert_eq!(wg20.slice_ix, wg30.slice_ix);
        assert!(sync.complete_logical_wg(&plan.map, wg20, true).unwrap().is_none());
        let t = sync.complete_logical_wg(&plan.map, wg30, true).unwrap().unwrap();
        assert_eq!(t.kind, TriggerKind::RemotePut);
        assert_eq!(t.slice_ix, wg30.slice_ix);
    }

    #[test]
    fn double_completion_rejected() {
        let plan = toy_plan();
        let sync = SliceSyncState::new(&plan.map);
        let wg = wg_by_label(&plan, 0, 0, 0);
        sync.complete_logical_wg(&plan.map, wg, true).unwrap();
        assert!(matches!(
            sync.complete_logical_wg(&plan.map, wg, true),
            Err(ProtocolError::DoubleCompletion { .. })
        ));
    }

    #[test]
    fn singleton_cluster_triggers_every_time() {
        let plan = FusedPlan::new(&problem(2, 1, 4, 2), &nodes(2), 1, 1, 1, Policy::CommAware).unwrap();
        let sync = SliceSyncState::new(&plan.map);
        for wg in &plan.map.wgs {
            assert!(sync.complete_logical_wg(&plan.map, wg, true).unwrap().is_some());
        }
    }

    #[test]
    fn every_order_of_four_completions_triggers_once_on_the_fourth() {
        // one slice of K=4 per (gpu, table, block)
        let plan = FusedPlan::new(&problem(1, 1, 4, 1), &nodes(1), 4, 1, 1, Policy::CommAware).unwrap();
        let wgs: Vec<_> = plan.map.wgs.iter().collect();
        assert_eq!(wgs.len(), 4);
        let mut perms = 0;
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let order = [a, b, c, d];
                        let mut seen = [false; 4];
                        if order.iter().any(|&i| std::mem::replace(&mut seen[i], true)) {
                            continue;
                        }
                        perms += 1;
                        let sync = SliceSyncState::new(&plan.map);
                        let fired: Vec<bool> = order
                            .iter()
                            .map(|&i| sync.complete_logical_wg(&plan.map, wgs[i], true).unwrap().is_some())
                            .collect();
                        assert_eq!(fired, vec![false, false, false, true]);
                    }
                }
            }
        }
        assert_eq!(perms, 24);
    }

    #[test]
    fn remote_emission_sequence() {
        let plan = toy_plan();
        let s = plan.map.gpu_slices(0).find(|&s| plan.map.slices[s].is_remote()).unwrap();
        let action = TriggerAction {
            slice_ix: s,
            slice: plan.map.slices[s].id,
            kind: TriggerKind::RemotePut,
        };
        let cmds = emit_remote_slice(&action, &plan.map, None).unwrap();
        assert_eq!(cmds.len(), 2);
        assert_eq!((cmds[0].kind, cmds[0].bytes, cmds[0].fence_after), (PutKind::Payload, 16, true));
        assert_eq!((cmds[1].kind, cmds[1].bytes), (PutKind::FlagSet, FLAG_BYTES));
        assert_eq!(cmds[1].dest_gpu, GpuId::new(1, 0));
        let local = TriggerAction {
            kind: TriggerKind::SetFlag,
            ..action
        };
        assert!(matches!(emit_remote_slice(&local, &plan.map, None), Err(ProtocolError::NotRemote { .. })));
    }

    #[test]
    fn store_targets() {
        let mut c = ClusterSpec::intra_node_quad();
        c.num_nodes = 1;
        let plan = FusedPlan::new(&problem(4, 1, 8, 2), &c, 2, 1, 1, Policy::CommAware).unwrap();
        let peer = plan.map.slices.iter().find(|s| s.route == Route::Peer).unwrap();
        let own = plan.map.slices.iter().find(|s| s.route == Route::Local).unwrap();
        assert_eq!(store_local_or_peer(peer, true).unwrap(), StoreKind::PeerDirect);
        assert_eq!(store_local_or_peer(own, true).unwrap(), StoreKind::LocalDirect);
        assert_eq!(store_local_or_peer(peer, false).unwrap(), StoreKind::Intermediate);
        let remote = toy_plan().map.slices.iter().find(|s| s.is_remote()).cloned().unwrap();
        assert!(store_local_or_peer(&remote, true).is_err());
    }

    #[test]
    fn drain_subsets_round_robin() {
        assert_eq!(drain_subset(8, 2, 0).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
        assert_eq!(drain_subset(8, 2, 1).collect::<Vec<_>>(), vec![1, 3, 5, 7]);
        assert_eq!(drain_subset(5, 1, 0).count(), 5);
    }

    #[test]
    fn toy_functional_run_matches_oracle() {
        let plan = toy_plan();
        let data = EmbeddingData::generate(&plan.problem, 6).unwrap();
        let oracle = shuffled_oracle(&plan.problem, &data).unwrap();
        for seed in 0..20 {
            let run = run_fused(&plan, &data, ExecMode::Functional, seed).unwrap();
            run.check_against(&oracle, ValueMode::ExactInt).unwrap();
            assert!(run.log.fence_violations(&plan).is_empty());
            assert!(run.log.trigger_counts(plan.map.slices.len()).iter().all(|&c| c == 1));
            // 4 remote slices per GPU, 2 messages each
            assert_eq!(run.stats.network_messages, 16);
        }
        // node 0 holds rows 0-1 of all 8 tables
        let w = plan.problem.output_width();
        for g in 0..8 {
            for row in 0..2 {
                let v = crate::embedding::pool_oracle(&plan.problem, &data, g, row).unwrap();
                let got = &run_fused(&plan, &data, ExecMode::Functional, 1).unwrap().outputs[0];
                assert_eq!(&got[row * w + g * 2..row * w + g * 2 + 2], v.as_slice());
            }
        }
    }

    #[test]
    fn single_node_has_no_puts() {
        let plan = FusedPlan::new(&problem(1, 3, 8, 4), &nodes(1), 3, 1, 2, Policy::CommAware).unwrap();
        let data = EmbeddingData::generate(&plan.problem, 1).unwrap();
        let run = run_fused(&plan, &data, ExecMode::Functional, 3).unwrap();
        assert_eq!(run.log.count(Action::PutPosted), 0);
        assert_eq!(run.stats.network_messages, 0);
        run.check_against(&shuffled_oracle(&plan.problem, &data).unwrap(), ValueMode::ExactInt)
            .unwrap();
    }

    #[test]
    fn flag_before_payload_is_caught() {
        let plan = toy_plan().with_fault(Some(Fault::FlagBeforePayload));
        let data = EmbeddingData::generate(&plan.problem, 6).unwrap();
        let err = run_fused(&plan, &data, ExecMode::Functional, 0).unwrap_err();
        assert!(matches!(err.protocol(), Some(ProtocolError::FenceViolation { .. })));
        assert!(!err.log.fence_violations(&plan).is_empty());
    }

    #[test]
    fn dropped_flag_deadlocks_with_report() {
        let plan = toy_plan().with_fault(Some(Fault::DropFlag));
        let data = EmbeddingData::generate(&plan.problem, 6).unwrap();
        let err = run_fused(&plan, &data, ExecMode::Functional, 0).unwrap_err();
        let Some(ProtocolError::Deadlock(report)) = err.protocol() else { panic!("expected deadlock") };
        assert_eq!(report.unset_flags.len(), 8);
        assert!(report.unfull_masks.is_empty());
        assert!(!report.stuck_workers.is_empty());
    }

    #[test]
    fn concurrent_run_matches_oracle() {
        let plan = toy_plan();
        let data = EmbeddingData::generate(&plan.problem, 9).unwrap();
        let oracle = shuffled_oracle(&plan.problem, &data).unwrap();
        for _ in 0..20 {
            let run = run_fused(&plan, &data, ExecMode::Concurrent, 0).unwrap();
            run.check_against(&oracle, ValueMode::ExactInt).unwrap();
            assert!(run.log.fence_violations(&plan).is_empty());
        }
    }

    #[test]
    fn concurrent_drop_flag_times_out() {
        let plan = toy_plan().with_fault(Some(Fault::DropFlag));
        let data = EmbeddingData::generate(&plan.problem, 9).unwrap();
        let err = run_concurrent(&plan, &data, Duration::from_millis(50)).unwrap_err();
        assert!(matches!(err.protocol(), Some(ProtocolError::Deadlock(_))));
    }

    #[test]
    fn exploration_of_toy_plan_is_clean() {
        let plan = FusedPlan::new(&problem(2, 1, 4, 1), &nodes(2), 2, 1, 2, Policy::CommAware).unwrap();
        let r = explore_interleavings(&plan, 1_000_000).unwrap();
        assert!(r.is_clean(), "{r:?}");
        assert!(r.interleavings > 1);
    }

    #[test]
    fn exploration_finds_missing_fence() {
        let plan = FusedPlan::new(&problem(2, 1, 4, 1), &nodes(2), 2, 1, 2, Policy::CommAware)
            .unwrap()
            .with_fault(Some(Fault::MissingFence));
        let r = explore_interleavings(&plan, 1_000_000).unwrap();
        assert!(r.fence_violations > 0);
        // and the random functional executor can get lucky either way; the
        // exhaustive search is what proves the fence is load-bearing
    }

    #[test]
    fn interleaving_count_of_independent_workers() {
        // one GPU, one slice of K=2 on persistent WGs 0 and 1 (steps a, b).
        // Only WG 0 polls the single flag, so exit e0 needs a and b while e1
        // needs only b: abe0e1, abe1e0, bae0e1, bae1e0, be1ae0.
        let plan = FusedPlan::new(&problem(1, 1, 2, 1), &nodes(1), 2, 1, 2, Policy::CommAware).unwrap();
        let r = explore_interleavings(&plan, 1000).unwrap();
        assert!(r.is_clean());
        assert_eq!(r.interleavings, 5);
    }

    #[test]
    fn event_log_jsonl_roundtrip() {
        let plan = toy_plan();
        let data = EmbeddingData::generate(&plan.problem, 6).unwrap();
        let run = run_fused(&plan, &data, ExecMode::Functional, 4).unwrap();
        let mut buf = Vec::new();
        run.log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().contains("\"actor\""));
        assert!(!text.contains("\"time\""));
        assert_eq!(EventLog::read_jsonl(&text).unwrap(), run.log);
    }
}
