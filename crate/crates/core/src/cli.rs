//! The four experiment commands behind the `fused-a2a` binary. Each one
//! writes its files under the configured output directory and returns the
//! lines to print.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, RunMode};
use crate::dlrm::{compare_scaleout, PassResult};
use crate::embedding::{shuffled_oracle, EmbeddingData};
use crate::error::{config_err, Error, Result};
use crate::protocol::{explore_interleavings, run_fused, ExecMode, ExplorationReport, FusedPlan, FusedRun, FusedRunError};
use crate::timesim::{simulate_baseline, simulate_fused, sweep, write_csv, FusedOptions, SweepRow};

/// What a command printed and wrote.
#[derive(Debug, Clone, Default)]
pub struct CommandOutput {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
    /// False when a check failed; the binary exits nonzero.
    pub passed: bool,
}

impl CommandOutput {
    fn ok() -> Self {
        Self {
            passed: true,
            ..Default::default()
        }
    }
}

fn create(dir: &Path, name: &str, out: &mut CommandOutput) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let f = File::create(&path)?;
    out.files.push(path);
    Ok(BufWriter::new(f))
}

fn ms(t: f64) -> String {
    format!("{:.3} ms", t * 1e3)
}

/// Outcome of `verify`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub functional_runs: usize,
    pub concurrent_runs: usize,
    pub violations: Vec<String>,
    /// NIC messages summed over all runs.
    pub network_messages: u64,
    pub exploration: Option<ExplorationReport>,
    /// Why the exhaustive search did not run or did not finish.
    pub exploration_note: Option<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        format!("{verdict}, {} violations", self.violations.len())
    }
}

/// The plan `verify` executes, after applying the verify-section overrides.
pub fn verify_plan(cfg: &ExperimentConfig) -> Result<FusedPlan> {
    let v = &cfg.verify;
    let problem = v.workload.as_ref().unwrap_or(&cfg.workload);
    let cluster = v.cluster.as_ref().unwrap_or(&cfg.cluster);
    Ok(FusedPlan::new(
        problem,
        cluster,
        v.slice_size.unwrap_or(cfg.slice_size),
        v.vectors_per_wg.unwrap_or(cfg.vectors_per_wg),
        v.persistent_wgs.unwrap_or_else(|| cfg.occupancy.persistent_wgs()),
        cfg.policy,
    )?
    .with_zero_copy(cfg.zero_copy)
    .with_fault(v.fault))
}

fn check_run(
    plan: &FusedPlan,
    oracle: &[Vec<f32>],
    label: &str,
    result: std::result::Result<FusedRun, FusedRunError>,
    report: &mut VerifyReport,
) -> Option<crate::protocol::EventLog> {
    let value_mode = plan.problem.value_mode;
    match result {
        Ok(run) => {
            report.network_messages += run.stats.network_messages;
            if let Err(e) = run.check_against(oracle, value_mode) {
                report.violations.push(format!("{label}: {e}"));
            }
            for e in run.log.fence_violations(plan) {
                report.violations.push(format!("{label}: {e}"));
            }
            let counts = run.log.trigger_counts(plan.map.slices.len());
            if let Some((s, &c)) = counts.iter().enumerate().find(|(_, &c)| c != 1) {
                report.violations.push(format!("{label}: slice {s} triggered {c} times"));
            }
            Some(run.log)
        }
        Err(e) => {
            report.violations.push(format!("{label}: {e}"));
            Some(e.log)
        }
    }
}

/// Runs the protocol with real data in the selected executors and checks
/// every output against the sequential oracle, then searches interleavings.
pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<(VerifyReport, CommandOutput)> {
    let plan = verify_plan(cfg)?;
    let v = &cfg.verify;
    let mut report = VerifyReport::default();
    let mut first_log = None;
    let functional = matches!(cfg.mode, RunMode::All | RunMode::Functional);
    let concurrent = matches!(cfg.mode, RunMode::All | RunMode::Concurrent);
    if !functional && !concurrent {
        return config_err(format!("verify does not support mode {}", cfg.mode));
    }
    if functional {
        for i in 0..v.functional_runs {
            let seed = cfg.seed.wrapping_add(i as u64);
            let data = EmbeddingData::generate(&plan.problem, seed)?;
            let oracle = shuffled_oracle(&plan.problem, &data)?;
            let log = check_run(
                &plan,
                &oracle,
                &format!("functional seed {seed}"),
                run_fused(&plan, &data, ExecMode::Functional, seed),
                &mut report,
            );
            report.functional_runs += 1;
            first_log = first_log.or(log);
        }
    }
    if concurrent {
        let data = EmbeddingData::generate(&plan.problem, cfg.seed)?;
        let oracle = shuffled_oracle(&plan.problem, &data)?;
        for i in 0..v.concurrent_runs {
            let before = report.violations.len();
            let log = check_run(
                &plan,
                &oracle,
                &format!("concurrent run {i}"),
                run_fused(&plan, &data, ExecMode::Concurrent, cfg.seed),
                &mut report,
            );
            report.concurrent_runs += 1;
            first_log = first_log.or(log);
            if report.violations.len() > before {
                // a stuck run costs the full timeout; one is enough
                break;
            }
        }
    }
    if v.max_states == 0 {
        report.exploration_note = Some("skipped".into());
    } else {
        match explore_interleavings(&plan, v.max_states) {
            Ok(r) => {
                if r.fence_violations > 0 {
                    report.violations.push(format!("exploration: {} fence violations", r.fence_violations));
                }
                if r.trigger_violations > 0 {
                    report.violations.push(format!("exploration: {} trigger violations", r.trigger_violations));
                }
                if r.deadlocks > 0 {
                    report.violations.push(format!("exploration: {} deadlocked states", r.deadlocks));
                }
                report.exploration = Some(r);
            }
            Err(Error::Config(msg)) => report.exploration_note = Some(format!("not exhaustive: {msg}")),
            Err(e) => return Err(e),
        }
    }

    let mut out = CommandOutput::ok();
    out.passed = report.passed();
    let dir = &cfg.outputs.dir;
    {
        #[derive(Serialize)]
        struct Doc<'a> {
            config: serde_json::Value,
            report: &'a VerifyReport,
        }
        let config = serde_json::from_str(&cfg.provenance_json())?;
        let mut w = create(dir, "verify.json", &mut out)?;
        serde_json::to_writer_pretty(&mut w, &Doc { config, report: &report })?;
        writeln!(w)?;
        w.flush()?;
    }
    if cfg.outputs.trace {
        if let Some(log) = &first_log {
            let mut w = create(dir, "verify_events.jsonl", &mut out)?;
            log.write_jsonl(&mut w)?;
            w.flush()?;
        }
    }
    out.lines.push(format!(
        "functional runs: {}, concurrent runs: {}, network messages: {}",
        report.functional_runs, report.concurrent_runs, report.network_messages
    ));
    match (&report.exploration, &report.exploration_note) {
        (Some(r), _) => out.lines.push(format!(
            "interleavings: {} over {} states, exhaustive",
            r.interleavings, r.states
        )),
        (None, Some(note)) => out.lines.push(format!("interleavings: {note}")),
        (None, None) => {}
    }
    for v in report.violations.iter().take(20) {
        out.lines.push(format!("violation: {v}"));
    }
    out.lines.push(report.summary());
    Ok((report, out))
}

/// One fused and one baseline simulation at the configured point.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<(SweepRow, CommandOutput)> {
    if matches!(cfg.mode, RunMode::Functional | RunMode::Concurrent) {
        return config_err(format!("simulate does not support mode {}", cfg.mode));
    }
    let sim = cfg.sim_config();
    let trace = cfg.outputs.trace;
    let fused = simulate_fused(
        &sim,
        FusedOptions {
            payload: None,
            record_events: trace,
        },
    )?;
    let baseline = simulate_baseline(&sim)?;
    let row = SweepRow::new("simulate", &sim, &fused, &baseline);

    let mut out = CommandOutput::ok();
    let dir = &cfg.outputs.dir;
    let mut w = create(dir, "simulate.csv", &mut out)?;
    write_csv(std::slice::from_ref(&row), &cfg.provenance_json(), &mut w)?;
    w.flush()?;
    if trace {
        if cfg.mode != RunMode::Baseline {
            let mut w = create(dir, "trace_fused.json", &mut out)?;
            fused.write_trace(&mut w)?;
            w.flush()?;
            let mut w = create(dir, "events_fused.jsonl", &mut out)?;
            fused.log.write_jsonl(&mut w)?;
            w.flush()?;
        }
        if cfg.mode != RunMode::Fused {
            let mut w = create(dir, "trace_baseline.json", &mut out)?;
            baseline.write_trace(&mut w)?;
            w.flush()?;
        }
    }
    out.lines.push(format!(
        "fused {}, baseline {}, fused/baseline {:.4}",
        ms(row.fused_time),
        ms(row.baseline_time),
        row.ratio
    ));
    out.lines.push(format!(
        "fused skew {:.2}%, {} network messages, {} bytes",
        row.skew * 100.0,
        row.messages,
        row.bytes
    ));
    Ok((row, out))
}

/// The configured sweep experiment, one CSV row per grid point.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<(Vec<SweepRow>, CommandOutput)> {
    let Some(sc) = &cfg.sweep else {
        return config_err("config has no sweep section");
    };
    let grid = sc.grids.get(&sc.experiment).cloned().unwrap_or_default();
    let rows = sweep(&cfg.sim_config(), sc.experiment, &grid)?;

    let mut out = CommandOutput::ok();
    let mut w = create(&cfg.outputs.dir, &format!("sweep_{}.csv", sc.experiment), &mut out)?;
    write_csv(&rows, &cfg.provenance_json(), &mut w)?;
    w.flush()?;
    for r in &rows {
        out.lines.push(format!(
            "batch {:>5} tables {:>4} S {:>4} occ {:>5.1}% {:<10} zc {:<5} fused {:>11} baseline {:>11} ratio {:.3} skew {:.2}%",
            r.batch,
            r.tables,
            r.slice_size,
            r.occupancy * 100.0,
            r.policy,
            r.zero_copy,
            ms(r.fused_time),
            ms(r.baseline_time),
            r.ratio,
            r.skew * 100.0
        ));
    }
    let mean = rows.iter().map(|r| r.ratio).sum::<f64>() / rows.len() as f64;
    out.lines.push(format!("{} points, mean fused/baseline {mean:.4}", rows.len()));
    Ok((rows, out))
}

#[derive(Debug, Serialize)]
struct NodeRow<'a> {
    mode: &'a str,
    node: &'a str,
    kind: String,
    start: f64,
    end: f64,
}

#[derive(Debug, Serialize)]
struct ScaleoutSummaryRow {
    baseline_time: f64,
    fused_time: f64,
    ratio: f64,
    exposed_a2a: f64,
    saving_bound: f64,
}

/// Baseline and fused DLRM iterations on the scale-out cluster.
pub fn cmd_scaleout(cfg: &ExperimentConfig) -> Result<(crate::dlrm::ScaleoutResult, CommandOutput)> {
    let Some(sc) = &cfg.scaleout else {
        return config_err("config has no scaleout section");
    };
    if matches!(cfg.mode, RunMode::Functional | RunMode::Concurrent) {
        return config_err(format!("scaleout does not support mode {}", cfg.mode));
    }
    let r = compare_scaleout(&sc.cluster, &sc.model, &sc.collective)?;

    let mut out = CommandOutput::ok();
    let header = format!("# config: {}", cfg.provenance_json());
    let dir = &cfg.outputs.dir;
    {
        let mut w = create(dir, "scaleout.csv", &mut out)?;
        writeln!(w, "{header}")?;
        let mut csv = csv::Writer::from_writer(&mut w);
        let mut emit = |label: &str, pass: &PassResult| -> Result<()> {
            for n in &pass.nodes {
                csv.serialize(NodeRow {
                    mode: label,
                    node: &n.id,
                    kind: serde_json::to_value(n.kind)?.as_str().unwrap_or_default().to_string(),
                    start: n.start,
                    end: n.end,
                })?;
            }
            Ok(())
        };
        if cfg.mode != RunMode::Fused {
            emit("baseline", &r.baseline)?;
        }
        if cfg.mode != RunMode::Baseline {
            emit("fused", &r.fused)?;
        }
        csv.flush()?;
        drop(csv);
        w.flush()?;
    }
    {
        let mut w = create(dir, "scaleout_summary.csv", &mut out)?;
        writeln!(w, "{header}")?;
        let mut csv = csv::Writer::from_writer(&mut w);
        csv.serialize(ScaleoutSummaryRow {
            baseline_time: r.baseline.total,
            fused_time: r.fused.total,
            ratio: r.ratio,
            exposed_a2a: r.exposed_a2a,
            saving_bound: r.saving_bound,
        })?;
        csv.flush()?;
        drop(csv);
        w.flush()?;
    }
    out.lines.push(format!(
        "{} GPUs: baseline {}, fused {}, fused/baseline {:.4}",
        sc.cluster.num_gpus(),
        ms(r.baseline.total),
        ms(r.fused.total),
        r.ratio
    ));
    out.lines.push(format!(
        "exposed forward All-to-All {}, saving bound {}, saving {}",
        ms(r.exposed_a2a),
        ms(r.saving_bound),
        ms(r.baseline.total - r.fused.total)
    ));
    Ok((r, out))
}
