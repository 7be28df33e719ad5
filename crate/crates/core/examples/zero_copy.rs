//! Inside one node the fused kernel stores results straight into the peer
//! GPUs' output buffers. Compares zero-copy against staged copies, with
//! real data carried through the timing model.

use fused_a2a::config::ExperimentConfig;
use fused_a2a::embedding::{shuffled_oracle, EmbeddingData, ValueMode};
use fused_a2a::protocol::compare_outputs;
use fused_a2a::timesim::{simulate_baseline, simulate_fused, FusedOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/intra_node.json").as_ref())?;
    let mut sim = cfg.sim_config();
    let baseline = simulate_baseline(&sim)?;
    println!(
        "baseline: {:.3} ms, {} intermediate bytes",
        baseline.total_time() * 1e3,
        baseline.counters.intermediate_bytes
    );
    for zero_copy in [true, false] {
        sim.zero_copy = zero_copy;
        let t = simulate_fused(&sim, FusedOptions::default())?;
        println!(
            "fused zero_copy={zero_copy:<5}: {:.3} ms, {} intermediate bytes, {} p2p bytes, ratio {:.3}",
            t.total_time() * 1e3,
            t.counters.intermediate_bytes,
            t.counters.p2p_bytes,
            t.total_time() / baseline.total_time()
        );
    }

    // a smaller problem with payload tracking on
    let mut small = sim.clone();
    small.problem = cfg.verify.workload.clone().expect("verify workload");
    small.problem.value_mode = ValueMode::ExactInt;
    small.slice_size = 2;
    small.zero_copy = true;
    let data = EmbeddingData::generate(&small.problem, cfg.seed)?;
    let t = simulate_fused(
        &small,
        FusedOptions {
            payload: Some(&data),
            record_events: false,
        },
    )?;
    compare_outputs(t.outputs.as_ref().unwrap(), &shuffled_oracle(&small.problem, &data)?, ValueMode::ExactInt)?;
    println!("payload-tracked zero-copy run matches the oracle");
    Ok(())
}
