//! Exhaustive search over every interleaving of WG steps and PUT deliveries
//! of a small plan, then the same search with the remote fence removed.

use fused_a2a::embedding::{EmbeddingProblem, PoolingMode, PoolingSize, ValueMode};
use fused_a2a::protocol::{explore_interleavings, Fault, FusedPlan};
use fused_a2a::scheduler::Policy;
use fused_a2a::topology::ClusterSpec;

fn main() -> fused_a2a::Result<()> {
    let problem = EmbeddingProblem {
        num_gpus: 2,
        tables_per_gpu: 1,
        global_batch: 4,
        embedding_dim: 2,
        pooling: PoolingSize::Fixed(1),
        pooling_mode: PoolingMode::Sum,
        rows_per_table: 4,
        value_mode: ValueMode::ExactInt,
    };
    let plan = FusedPlan::new(&problem, &ClusterSpec::inter_node_pair(), 2, 1, 2, Policy::CommAware)?;
    let max_wgs = plan.map.slices.iter().map(|s| s.wg_count()).max().unwrap_or(0);
    println!("{} slices, at most {max_wgs} WGs per slice", plan.map.slices.len());
    let r = explore_interleavings(&plan, 1_000_000)?;
    println!("correct protocol: {r:?}, clean = {}", r.is_clean());

    let broken = plan.clone().with_fault(Some(Fault::MissingFence));
    let r = explore_interleavings(&broken, 1_000_000)?;
    println!("without the fence: {r:?}, clean = {}", r.is_clean());
    Ok(())
}
