//! Parameter sweeps over the timing model and their CSV output.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate_baseline, simulate_fused, FusedOptions, SimConfig, Timeline};
use crate::error::{config_err, Error, Result};
use crate::scheduler::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    SliceSize,
    Occupancy,
    BatchTables,
    PolicySkew,
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "slice_size" => Ok(Experiment::SliceSize),
            "occupancy" => Ok(Experiment::Occupancy),
            "batch_tables" => Ok(Experiment::BatchTables),
            "policy_skew" => Ok(Experiment::PolicySkew),
            other => config_err(format!("unknown experiment {other:?}")),
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Experiment::SliceSize => "slice_size",
            Experiment::Occupancy => "occupancy",
            Experiment::BatchTables => "batch_tables",
            Experiment::PolicySkew => "policy_skew",
        })
    }
}

/// Values per axis; an empty axis keeps the base configuration's value.
/// Points are the cartesian product of the axes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub batches: Vec<usize>,
    pub tables: Vec<usize>,
    pub slice_sizes: Vec<usize>,
    pub occupancies: Vec<f64>,
    pub policies: Vec<Policy>,
    pub zero_copy: Vec<bool>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
            && self.tables.is_empty()
            && self.slice_sizes.is_empty()
            && self.occupancies.is_empty()
            && self.policies.is_empty()
            && self.zero_copy.is_empty()
    }

    /// Every configuration of the grid, in axis order (batch outermost).
    pub fn points(&self, base: &SimConfig) -> Result<Vec<SimConfig>> {
        if self.is_empty() {
            return config_err("no configurations");
        }
        fn or<T: Clone>(axis: &[T], base: T) -> Vec<T> {
            if axis.is_empty() {
                vec![base]
            } else {
                axis.to_vec()
            }
        }
        let mut out = Vec::new();
        for &batch in &or(&self.batches, base.problem.global_batch) {
            for &tables in &or(&self.tables, base.problem.tables_per_gpu) {
                for &slice_size in &or(&self.slice_sizes, base.slice_size) {
                    for &occupancy in &or(&self.occupancies, base.occupancy.occupancy_fraction) {
                        for &policy in &or(&self.policies, base.policy) {
                            for &zero_copy in &or(&self.zero_copy, base.zero_copy) {
                                let mut c = base.clone();
                                c.problem.global_batch = batch;
                                c.problem.tables_per_gpu = tables;
                                c.slice_size = slice_size;
                                c.occupancy.occupancy_fraction = occupancy;
                                c.policy = policy;
                                c.zero_copy = zero_copy;
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub experiment: String,
    pub batch: usize,
    pub tables: usize,
    pub slice_size: usize,
    pub occupancy: f64,
    pub policy: String,
    pub zero_copy: bool,
    pub fused_time: f64,
    pub baseline_time: f64,
    pub ratio: f64,
    /// Skew of the fused run's node completion times.
    pub skew: f64,
    /// Network messages of the fused run.
    pub messages: u64,
    /// Network bytes of the fused run.
    pub bytes: u64,
}

/// Runs both operators at `cfg` and summarizes them.
pub fn run_point(experiment: Experiment, cfg: &SimConfig) -> Result<SweepRow> {
    summarize(&experiment.to_string(), cfg)
}

/// Like [`run_point`] with a free-form label in the `experiment` column.
pub fn summarize(label: &str, cfg: &SimConfig) -> Result<SweepRow> {
    let fused = simulate_fused(cfg, FusedOptions::default())?;
    let baseline = simulate_baseline(cfg)?;
    Ok(SweepRow::new(label, cfg, &fused, &baseline))
}

impl SweepRow {
    pub fn new(label: &str, cfg: &SimConfig, fused: &Timeline, baseline: &Timeline) -> Self {
        let (f, b) = (fused.total_time(), baseline.total_time());
        SweepRow {
            experiment: label.to_string(),
            batch: cfg.problem.global_batch,
            tables: cfg.problem.tables_per_gpu,
            slice_size: cfg.slice_size,
            occupancy: cfg.occupancy.occupancy_fraction,
            policy: cfg.policy.to_string(),
            zero_copy: cfg.zero_copy,
            fused_time: f,
            baseline_time: b,
            ratio: f / b,
            skew: fused.skew(),
            messages: fused.counters.messages,
            bytes: fused.counters.bytes,
        }
    }
}

/// One row per grid point, in grid order. Points run in parallel.
pub fn sweep(base: &SimConfig, experiment: Experiment, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    grid.points(base)?
        .par_iter()
        .map(|c| run_point(experiment, c))
        .collect()
}

/// Writes `# config: <json>` followed by the CSV table.
pub fn write_csv<W: Write>(rows: &[SweepRow], config_json: &str, mut w: W) -> Result<()> {
    writeln!(w, "# config: {config_json}")?;
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}
