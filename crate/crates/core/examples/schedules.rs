//! Task loops of the persistent WGs under both policies. With comm_aware,
//! every WG of a remote slice comes before any WG of a local slice.

use fused_a2a::embedding::{EmbeddingProblem, PoolingMode, PoolingSize, SliceMap, ValueMode};
use fused_a2a::scheduler::{build_schedule, check_schedule, Policy};
use fused_a2a::topology::ClusterSpec;

fn main() -> fused_a2a::Result<()> {
    let problem = EmbeddingProblem {
        num_gpus: 2,
        tables_per_gpu: 2,
        global_batch: 8,
        embedding_dim: 4,
        pooling: PoolingSize::Fixed(1),
        pooling_mode: PoolingMode::Sum,
        rows_per_table: 4,
        value_mode: ValueMode::Float32,
    };
    let map = SliceMap::build(&problem, &ClusterSpec::inter_node_pair(), 2, 1)?;
    for policy in [Policy::Oblivious, Policy::CommAware] {
        let s = build_schedule(&map, 0, 3, policy)?;
        check_schedule(&map, &s)?;
        println!("GPU 0, {policy}:");
        for (p, list) in s.lists.iter().enumerate() {
            let tags: Vec<String> = list
                .iter()
                .map(|&w| {
                    let remote = map.slices[map.wgs[w].slice_ix].is_remote();
                    format!("{w}{}", if remote { "R" } else { "L" })
                })
                .collect();
            println!("  pwg {p}: {}", tags.join(" "));
        }
    }
    Ok(())
}
