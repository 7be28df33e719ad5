//! Fused time against slice size on the calibrated two-node configuration.

use fused_a2a::config::ExperimentConfig;
use fused_a2a::timesim::{sweep, Experiment, SweepGrid};

fn main() -> fused_a2a::Result<()> {
    let cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json").as_ref())?;
    let grid = SweepGrid {
        slice_sizes: vec![4, 8, 16, 32, 64, 128],
        ..Default::default()
    };
    let rows = sweep(&cfg.sim_config(), Experiment::SliceSize, &grid)?;
    let at = |s: usize| rows.iter().find(|r| r.slice_size == s).unwrap().fused_time;
    for r in &rows {
        println!("S {:>4}: fused {:>7.3} ms, ratio {:.3}", r.slice_size, r.fused_time * 1e3, r.ratio);
    }
    println!("S=64 is {:.1}% faster than S=4", (1.0 - at(64) / at(4)) * 100.0);
    println!("S=128 / S=64 = {:.4}", at(128) / at(64));
    Ok(())
}
