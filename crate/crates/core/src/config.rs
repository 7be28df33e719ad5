//! Experiment configuration files and command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dlrm::{CollectiveModel, ModelParams};
use crate::embedding::EmbeddingProblem;
use crate::error::{config_err, Error, Result};
use crate::protocol::Fault;
use crate::scheduler::{OccupancyConfig, Policy};
use crate::timesim::{ComputeModel, Experiment, SimConfig, SweepGrid};
use crate::topology::ClusterSpec;

/// Which executors or operators a command runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Everything the command supports.
    #[default]
    All,
    /// verify: seeded single-threaded executor only.
    Functional,
    /// verify: multi-threaded executor only.
    Concurrent,
    /// simulate / scaleout: fused operator only.
    Fused,
    /// simulate / scaleout: bulk-synchronous baseline only.
    Baseline,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(RunMode::All),
            "functional" => Ok(RunMode::Functional),
            "concurrent" => Ok(RunMode::Concurrent),
            "fused" => Ok(RunMode::Fused),
            "baseline" => Ok(RunMode::Baseline),
            other => config_err(format!("unknown mode {other:?}")),
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunMode::All => "all",
            RunMode::Functional => "functional",
            RunMode::Concurrent => "concurrent",
            RunMode::Fused => "fused",
            RunMode::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write trace JSON and event logs.
    pub trace: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            trace: false,
        }
    }
}

/// Settings of `verify`. Unset workload fields fall back to the main ones,
/// which are often far too large to execute with real data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub workload: Option<EmbeddingProblem>,
    pub cluster: Option<ClusterSpec>,
    pub slice_size: Option<usize>,
    pub vectors_per_wg: Option<usize>,
    pub persistent_wgs: Option<usize>,
    /// Functional runs, one per seed starting at the config seed.
    pub functional_runs: usize,
    pub concurrent_runs: usize,
    /// State cap of the exhaustive interleaving search; 0 skips it.
    pub max_states: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            workload: None,
            cluster: None,
            slice_size: None,
            vectors_per_wg: None,
            persistent_wgs: None,
            functional_runs: 16,
            concurrent_runs: 16,
            max_states: 200_000,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub experiment: Experiment,
    /// Grid per experiment name; a missing entry is an empty grid.
    #[serde(default)]
    pub grids: BTreeMap<Experiment, SweepGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleoutConfig {
    /// Free text carried into output headers, e.g. where the kernel times came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub cluster: ClusterSpec,
    pub model: ModelParams,
    #[serde(default)]
    pub collective: CollectiveModel,
}

fn default_slice_size() -> usize {
    64
}

fn default_vectors_per_wg() -> usize {
    2
}

fn default_true() -> bool {
    true
}

fn default_max_message() -> u64 {
    1 << 20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workload: EmbeddingProblem,
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub compute: ComputeModel,
    #[serde(default)]
    pub occupancy: OccupancyConfig,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default = "default_slice_size")]
    pub slice_size: usize,
    #[serde(default = "default_vectors_per_wg")]
    pub vectors_per_wg: usize,
    #[serde(default = "default_true")]
    pub zero_copy: bool,
    #[serde(default = "default_max_message")]
    pub max_message_size: u64,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub scaleout: Option<ScaleoutConfig>,
}

fn default_policy() -> Policy {
    Policy::CommAware
}

/// Values given on the command line; each replaces its config entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<RunMode>,
    pub policy: Option<Policy>,
    pub slice_size: Option<usize>,
    pub occupancy: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub trace: bool,
    pub fault: Option<Fault>,
    pub experiment: Option<Experiment>,
}

/// Occupancy as a fraction ("0.75") or a percentage ("75%").
pub fn parse_occupancy(s: &str) -> Result<f64> {
    let (num, scale) = match s.strip_suffix('%') {
        Some(n) => (n, 100.0),
        None => (s, 1.0),
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad occupancy {s:?}")))?;
    let v = v / scale;
    if !(v > 0.0 && v <= 1.0) {
        return config_err(format!("occupancy {s:?} is outside (0, 1]"));
    }
    Ok(v)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if let Some(v) = o.policy {
            self.policy = v;
        }
        if let Some(v) = o.slice_size {
            self.slice_size = v;
        }
        if let Some(v) = o.occupancy {
            self.occupancy.occupancy_fraction = v;
        }
        if let Some(v) = &o.out_dir {
            self.outputs.dir = v.clone();
        }
        if o.trace {
            self.outputs.trace = true;
        }
        if o.fault.is_some() {
            self.verify.fault = o.fault;
        }
        if let Some(e) = o.experiment {
            match &mut self.sweep {
                Some(s) => s.experiment = e,
                None => {
                    self.sweep = Some(SweepConfig {
                        experiment: e,
                        grids: BTreeMap::new(),
                    })
                }
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.sim_config().validate()?;
        if self.slice_size == 0 || self.vectors_per_wg == 0 {
            return config_err("slice_size and vectors_per_wg must be positive");
        }
        if let Some(s) = &self.scaleout {
            s.cluster.validate()?;
            s.model.validate()?;
        }
        Ok(())
    }

    /// The single-point timing configuration.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            problem: self.workload.clone(),
            cluster: self.cluster.clone(),
            compute: self.compute,
            occupancy: self.occupancy,
            policy: self.policy,
            slice_size: self.slice_size,
            vectors_per_wg: self.vectors_per_wg,
            zero_copy: self.zero_copy,
            max_message_size: self.max_message_size,
        }
    }

    /// Compact JSON of everything except output locations, for file headers.
    pub fn provenance_json(&self) -> String {
        let mut c = self.clone();
        c.outputs = OutputConfig::default();
        serde_json::to_string(&c).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 3,
        "workload": {"num_gpus": 2, "tables_per_gpu": 2, "global_batch": 8, "embedding_dim": 4,
                     "pooling": {"fixed": 3}, "pooling_mode": "sum", "rows_per_table": 10,
                     "value_mode": "exact_int"},
        "cluster": {"num_nodes": 2, "gpus_per_node": 1, "p2p_link": null,
                    "nic_link": {"bandwidth": 1e9, "per_message_overhead": 1e-6, "latency": 1e-6},
                    "topology": "flat"}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.slice_size, 64);
        assert_eq!(c.vectors_per_wg, 2);
        assert_eq!(c.policy, Policy::CommAware);
        assert!(c.zero_copy);
        assert_eq!(c.mode, RunMode::All);
        assert_eq!(c.occupancy, OccupancyConfig::default());
        assert!(c.sweep.is_none());
    }

    #[test]
    fn seed_is_mandatory() {
        let text = MINIMAL.replace("\"seed\": 3,", "");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut c = ExperimentConfig::from_json(MINIMAL).unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            policy: Some(Policy::Oblivious),
            slice_size: Some(2),
            occupancy: Some(0.5),
            out_dir: Some("elsewhere".into()),
            trace: true,
            experiment: Some(Experiment::Occupancy),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.policy, Policy::Oblivious);
        assert_eq!(c.slice_size, 2);
        assert_eq!(c.occupancy.occupancy_fraction, 0.5);
        assert_eq!(c.outputs.dir, PathBuf::from("elsewhere"));
        assert!(c.outputs.trace);
        assert_eq!(c.sweep.unwrap().experiment, Experiment::Occupancy);
    }

    #[test]
    fn occupancy_accepts_fraction_or_percent() {
        assert_eq!(parse_occupancy("0.75").unwrap(), 0.75);
        assert_eq!(parse_occupancy("87.5%").unwrap(), 0.875);
        assert!(parse_occupancy("87.5").is_err());
        assert!(parse_occupancy("0").is_err());
    }

    #[test]
    fn provenance_ignores_output_location() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.outputs.dir = "/tmp/x".into();
        assert_eq!(a.provenance_json(), b.provenance_json());
        assert!(!a.provenance_json().contains('\n'));
    }

    #[test]
    fn bad_override_is_rejected() {
        let mut c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert!(c
            .apply(&Overrides {
                slice_size: Some(0),
                ..Default::default()
            })
            .is_err());
    }
}
