//! One DLRM training iteration on a 128-node 2D torus, with and without the
//! fused forward embedding + All-to-All. Kernel times come from the config's
//! placeholder profile.

use fused_a2a::config::ExperimentConfig;
use fused_a2a::dlrm::compare_scaleout;

fn main() -> fused_a2a::Result<()> {
    let cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json").as_ref())?;
    let sc = cfg.scaleout.expect("scaleout section");
    let r = compare_scaleout(&sc.cluster, &sc.model, &sc.collective)?;
    for (name, pass) in [("baseline", &r.baseline), ("fused", &r.fused)] {
        println!("{name}:");
        for n in &pass.nodes {
            println!("  {:<16} {:>7.3} .. {:>7.3} ms", n.id, n.start * 1e3, n.end * 1e3);
        }
    }
    println!(
        "fused/baseline {:.4}; saving {:.3} ms, bound min(embedding, exposed A2A) = {:.3} ms",
        r.ratio,
        (r.baseline.total - r.fused.total) * 1e3,
        r.saving_bound * 1e3
    );
    Ok(())
}
