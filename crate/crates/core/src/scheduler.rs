//! Assignment of logical WGs to persistent WGs and the order of each task loop.

use serde::{Deserialize, Serialize};

use crate::embedding::{Route, SliceMap};
use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Remote-slice WGs first, each group in ascending id order.
    CommAware,
    /// Ascending logical WG id.
    Oblivious,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "comm_aware" | "comm-aware" => Ok(Policy::CommAware),
            "oblivious" => Ok(Policy::Oblivious),
            other => config_err(format!("unknown policy {other:?}")),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Policy::CommAware => "comm_aware",
            Policy::Oblivious => "oblivious",
        })
    }
}

/// Occupancy cap of the fused kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyConfig {
    /// Concurrent WGs the baseline embedding kernel reaches at full occupancy.
    pub max_concurrent_wgs: usize,
    /// Fraction of `max_concurrent_wgs` the fused kernel is launched with.
    pub occupancy_fraction: f64,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        Self {
            max_concurrent_wgs: 128,
            occupancy_fraction: 0.875,
        }
    }
}

impl OccupancyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_concurrent_wgs == 0 {
            return config_err("max_concurrent_wgs must be at least 1");
        }
        if !(self.occupancy_fraction > 0.0 && self.occupancy_fraction <= 1.0) {
            return config_err("occupancy_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    /// Persistent WGs the fused kernel launches per GPU.
    pub fn persistent_wgs(&self) -> usize {
        ((self.max_concurrent_wgs as f64 * self.occupancy_fraction + 1e-9).floor() as usize).max(1)
    }
}

/// Task loops of the persistent WGs on one GPU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub gpu_rank: usize,
    pub policy: Policy,
    /// `lists[p]` is the ordered global logical WG ids run by persistent WG `p`.
    pub lists: Vec<Vec<usize>>,
}

impl Schedule {
    pub fn num_persistent_wgs(&self) -> usize {
        self.lists.len()
    }

    pub fn total_wgs(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

/// Builds the task loops for GPU `rank`.
///
/// Logical WGs are dealt round-robin in id order, so the WGs of one slice sit
/// on distinct persistent WGs whenever `persistent_wgs >= K`. The policy only
/// changes the order inside each list.
pub fn build_schedule(map: &SliceMap, rank: usize, persistent_wgs: usize, policy: Policy) -> Result<Schedule> {
    if persistent_wgs == 0 {
        return config_err("at least one persistent WG is required");
    }
    if rank >= map.num_gpus {
        return config_err(format!("GPU rank {rank} out of range"));
    }
    let mut lists = vec![Vec::new(); persistent_wgs];
    for (i, wg) in map.gpu_wgs(rank).enumerate() {
        lists[i % persistent_wgs].push(wg);
    }
    if policy == Policy::CommAware {
        for list in &mut lists {
            let (remote, local): (Vec<usize>, Vec<usize>) = list
                .iter()
                .partition(|&&wg| map.slices[map.wgs[wg].slice_ix].route == Route::Remote);
            *list = remote.into_iter().chain(local).collect();
        }
    }
    Ok(Schedule {
        gpu_rank: rank,
        policy,
        lists,
    })
}

/// One schedule per GPU.
pub fn build_schedules(map: &SliceMap, persistent_wgs: usize, policy: Policy) -> Result<Vec<Schedule>> {
    (0..map.num_gpus)
        .map(|r| build_schedule(map, r, persistent_wgs, policy))
        .collect()
}

/// Relative spread `(max - min) / min` of per-node completion times.
pub fn skew(completion_times: &[f64]) -> Result<f64> {
    if completion_times.is_empty() {
        return config_err("skew of an empty set of completion times");
    }
    let min = completion_times.iter().copied().fold(f64::INFINITY, f64::min);
    let max = completion_times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(0.0);
    }
    Ok((max - min) / min)
}

/// Checks that a schedule is a permutation of the GPU's logical WGs and, for
/// communication-aware schedules, that remote work precedes local work.
pub fn check_schedule(map: &SliceMap, schedule: &Schedule) -> Result<()> {
    let range = map.gpu_wgs(schedule.gpu_rank);
    let mut seen = vec![false; range.len()];
    for list in &schedule.lists {
        for &wg in list {
            if !range.contains(&wg) || std::mem::replace(&mut seen[wg - range.start], true) {
                return config_err(format!("logical WG {wg} is foreign or duplicated"));
            }
        }
        if schedule.policy == Policy::CommAware {
            let is_remote = |wg: &usize| map.slices[map.wgs[*wg].slice_ix].route == Route::Remote;
            if let Some(first_local) = list.iter().position(|wg| !is_remote(wg)) {
                if list[first_local..].iter().any(is_remote) {
                    return config_err("remote-slice WG scheduled after a local-slice WG");
                }
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return config_err("schedule drops logical WGs");
    }
    Ok(())
}
