//! The `verify` command as a library call: functional and concurrent runs
//! against the oracle plus the interleaving search, then with a fault.

use fused_a2a::cli::cmd_verify;
use fused_a2a::config::{ExperimentConfig, Overrides};
use fused_a2a::protocol::Fault;

fn main() -> fused_a2a::Result<()> {
    let dir = std::env::temp_dir().join("fused-a2a-verify-example");
    let mut cfg = ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json").as_ref())?;
    cfg.apply(&Overrides {
        out_dir: Some(dir),
        ..Default::default()
    })?;
    let (_, out) = cmd_verify(&cfg)?;
    out.lines.iter().for_each(|l| println!("{l}"));

    cfg.apply(&Overrides {
        fault: Some(Fault::FlagBeforePayload),
        ..Default::default()
    })?;
    let (report, _) = cmd_verify(&cfg)?;
    println!("with flag_before_payload: {}", report.summary());
    if let Some(v) = report.violations.first() {
        println!("  first: {v}");
    }
    Ok(())
}
