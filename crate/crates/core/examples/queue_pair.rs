//! GPU-side view of a NIC queue pair: post commands, ring the doorbell, let
//! the NIC service them and poll completions.

use fused_a2a::netsim::QueuePair;
use fused_a2a::topology::{ClusterSpec, GpuId};

fn main() -> fused_a2a::Result<()> {
    let cluster = ClusterSpec::inter_node_pair();
    let me = GpuId { node: 0, local_gpu: 0 };
    let link = cluster.link_between(me, GpuId { node: 1, local_gpu: 0 })?;
    let mut qp: QueuePair<&str> = QueuePair::new(me, link);

    qp.post("payload slice 0", 64 * 1024, link, 0.0);
    qp.post("flag slice 0", 8, link, 0.0);
    println!("posted 2, doorbell {} consumed {}", qp.doorbell(), qp.consumed());
    qp.ring_doorbell();
    for d in qp.service() {
        println!(
            "  nic {:.3}..{:.3} us, delivered at {:.3} us",
            d.nic_start * 1e6,
            d.nic_end * 1e6,
            d.deliver_at * 1e6
        );
    }
    let half = qp.poll_cq(5e-6);
    println!("completions by 5 us: {:?}", half.iter().map(|c| c.item).collect::<Vec<_>>());
    let rest = qp.poll_cq(f64::INFINITY);
    println!("remaining: {:?}", rest.iter().map(|c| (c.item, c.at * 1e6)).collect::<Vec<_>>());
    println!("stats {:?}", qp.stats);
    Ok(())
}
