use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fused_a2a::cli::{cmd_scaleout, cmd_simulate, cmd_sweep, cmd_verify, CommandOutput};
use fused_a2a::config::{parse_occupancy, ExperimentConfig, Overrides, RunMode};
use fused_a2a::protocol::Fault;
use fused_a2a::scheduler::Policy;
use fused_a2a::timesim::Experiment;

#[derive(Parser)]
#[command(name = "fused-a2a", version, about = "Fused embedding + All-to-All experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "configs/default.json")]
    config: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// verify: functional | concurrent | all; simulate, scaleout: fused | baseline | all.
    #[arg(long, global = true)]
    mode: Option<RunMode>,
    /// comm_aware | oblivious
    #[arg(long, global = true)]
    policy: Option<Policy>,
    #[arg(long, global = true)]
    slice_size: Option<usize>,
    /// Fraction ("0.75") or percentage ("75%").
    #[arg(long, global = true, value_parser = parse_occupancy)]
    occupancy: Option<f64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Also write trace JSON and event logs.
    #[arg(long, global = true)]
    trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check the protocol against the pooling oracle.
    Verify {
        /// flag_before_payload | missing_fence | drop_flag
        #[arg(long)]
        fault: Option<Fault>,
    },
    /// Simulate the fused operator and the baseline at one point.
    Simulate,
    /// Run a parameter sweep from the config.
    Sweep {
        /// slice_size | occupancy | batch_tables | policy_skew
        #[arg(long)]
        experiment: Option<Experiment>,
    },
    /// Simulate a DLRM iteration on the scale-out cluster.
    Scaleout,
}

fn run(args: Args) -> fused_a2a::Result<CommandOutput> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let mut o = Overrides {
        seed: args.seed,
        mode: args.mode,
        policy: args.policy,
        slice_size: args.slice_size,
        occupancy: args.occupancy,
        out_dir: args.out_dir,
        trace: args.trace,
        ..Default::default()
    };
    match &args.command {
        Command::Verify { fault } => o.fault = *fault,
        Command::Sweep { experiment } => o.experiment = *experiment,
        _ => {}
    }
    cfg.apply(&o)?;
    Ok(match args.command {
        Command::Verify { .. } => cmd_verify(&cfg)?.1,
        Command::Simulate => cmd_simulate(&cfg)?.1,
        Command::Sweep { .. } => cmd_sweep(&cfg)?.1,
        Command::Scaleout => cmd_scaleout(&cfg)?.1,
    })
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(out) => {
            for l in &out.lines {
                println!("{l}");
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            if out.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
