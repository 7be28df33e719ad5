//! Cluster descriptions and the link a message between two GPUs takes.

use fused_a2a::topology::{ClusterSpec, GpuId};

fn main() -> fused_a2a::Result<()> {
    let quad = ClusterSpec::intra_node_quad();
    let a = GpuId { node: 0, local_gpu: 0 };
    let b = GpuId { node: 0, local_gpu: 3 };
    println!("intra-node quad: {} GPUs", quad.num_gpus());
    println!("  gpu0 -> gpu3 peer: {}, link {:?}", quad.is_peer(a, b)?, quad.link_between(a, b)?);

    let torus = ClusterSpec::torus(8, 16);
    println!("8x16 torus: {} GPUs", torus.num_gpus());
    for dst in [1, 8, 15, 16, 72, 127] {
        let link = torus.link_between(torus.gpu(0), torus.gpu(dst))?;
        println!(
            "  node 0 -> node {dst:>3}: {} hops, path latency {:.2} us",
            link.hops,
            link.path_latency() * 1e6
        );
    }
    Ok(())
}
