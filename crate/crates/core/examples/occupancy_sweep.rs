//! Fused time against kernel occupancy. More resident WGs hide more latency
//! until contention for memory bandwidth takes over.

use fused_a2a::config::ExperimentConfig;
use fused_a2a::timesim::{sweep, Experiment, SweepGrid};

fn main() -> fused_a2a::Result<()> {
    let cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json").as_ref())?;
    let grid = SweepGrid {
        occupancies: vec![0.25, 0.5, 0.75, 0.875],
        ..Default::default()
    };
    let rows = sweep(&cfg.sim_config(), Experiment::Occupancy, &grid)?;
    for r in &rows {
        let c = (cfg.occupancy.max_concurrent_wgs as f64 * r.occupancy) as usize;
        println!(
            "occupancy {:>5.1}% ({c:>3} WGs, contention x{:.3}): fused {:.3} ms",
            r.occupancy * 100.0,
            cfg.compute.contention(c),
            r.fused_time * 1e3
        );
    }
    println!("25% -> 75%: {:.1}% lower", (1.0 - rows[2].fused_time / rows[0].fused_time) * 100.0);
    println!("75% -> 87.5%: {:.1}% higher", (rows[3].fused_time / rows[2].fused_time - 1.0) * 100.0);
    Ok(())
}
