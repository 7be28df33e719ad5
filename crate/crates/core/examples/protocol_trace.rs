//! Runs the fused protocol on a two-node toy problem with real data and
//! prints its event log: WG completions, triggers, PUTs and flags.

use fused_a2a::embedding::{shuffled_oracle, EmbeddingData, EmbeddingProblem, PoolingMode, PoolingSize, ValueMode};
use fused_a2a::protocol::{run_fused, ExecMode, FusedPlan};
use fused_a2a::scheduler::Policy;
use fused_a2a::topology::ClusterSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let problem = EmbeddingProblem {
        num_gpus: 2,
        tables_per_gpu: 1,
        global_batch: 4,
        embedding_dim: 2,
        pooling: PoolingSize::Fixed(2),
        pooling_mode: PoolingMode::Sum,
        rows_per_table: 6,
        value_mode: ValueMode::ExactInt,
    };
    let plan = FusedPlan::new(&problem, &ClusterSpec::inter_node_pair(), 2, 1, 2, Policy::CommAware)?;
    let data = EmbeddingData::generate(&problem, 1)?;
    let run = run_fused(&plan, &data, ExecMode::Functional, 3)?;
    for e in &run.log.events {
        let slice = e.slice.map(|s| format!("slice {s}")).unwrap_or_default();
        println!("{:>3} {:<12} {:<18} {:<10} {} B", e.seq, e.actor, format!("{:?}", e.action), slice, e.bytes);
    }
    run.check_against(&shuffled_oracle(&problem, &data)?, ValueMode::ExactInt)?;
    println!(
        "outputs match the oracle; {} triggers, {} network messages, {} bytes",
        run.stats.triggers, run.stats.network_messages, run.stats.network_bytes
    );
    run.log.write_jsonl(std::io::stdout().lock())?;
    Ok(())
}
