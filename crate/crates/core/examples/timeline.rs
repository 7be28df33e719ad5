//! Fused and baseline timelines for the calibrated two-node configuration.
//! The fused kernel issues remote PUTs while it still computes; the baseline
//! exposes its whole All-to-All after the embedding kernels end.
//!
//! Pass a path to also export the fused timeline as trace JSON.

use fused_a2a::config::ExperimentConfig;
use fused_a2a::timesim::{simulate_baseline, simulate_fused, Activity, FusedOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json").as_ref())?;
    let sim = cfg.sim_config();
    let plan = sim.plan()?;
    let fused = simulate_fused(&sim, FusedOptions::default())?;
    let baseline = simulate_baseline(&sim)?;

    // per persistent WG: every remote trigger happens before its first local-slice compute
    let mut ordered = 0;
    for w in &fused.workers {
        let mut seen_local = false;
        let mut ok = true;
        for i in &w.intervals {
            match i.activity {
                Activity::Compute { wg, .. } => seen_local |= !plan.map.slices[plan.map.wgs[wg].slice_ix].is_remote(),
                Activity::Trigger { slice } if plan.map.slices[slice].is_remote() => ok &= !seen_local,
                _ => {}
            }
        }
        ordered += ok as usize;
    }
    let ms = |t: f64| t * 1e3;
    println!(
        "fused: {ordered}/{} persistent WGs issue all their remote PUTs before computing a local slice",
        fused.workers.len()
    );
    println!(
        "  {} network messages posted from inside the kernel; GPU 0 compute ends {:.3} ms, done {:.3} ms",
        fused.counters.messages,
        ms(fused.compute_end(0)),
        ms(fused.gpu_completion[0])
    );
    println!("baseline, GPU 0:");
    for p in baseline.phases.iter().filter(|p| p.gpu == 0) {
        println!("  {:<18} {:>8.3} .. {:>8.3} ms", p.name, ms(p.start), ms(p.end));
    }
    println!(
        "total: fused {:.3} ms, baseline {:.3} ms, ratio {:.3}",
        ms(fused.total_time()),
        ms(baseline.total_time()),
        fused.total_time() / baseline.total_time()
    );
    if let Some(path) = std::env::args().nth(1) {
        fused.write_trace(std::fs::File::create(&path)?)?;
        println!("trace written to {path}");
    }
    Ok(())
}
