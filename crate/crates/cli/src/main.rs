use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qnd_core::estimator::Simulator;
use qnd_core::harness::{
    estimate_cmd, exit_code, grid_cmd, rates_cmd, resolve_out_dir, simulate_cmd, EstimateOptions,
    EstimateStatus, SimulateOptions, EXIT_INSUFFICIENT,
};

#[derive(Parser)]
#[command(
    name = "qnd",
    version,
    about = "Trajectory simulation and filter-bank parameter estimation for QND measurements"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimulatorArg {
    Full,
    Reduced,
}

impl From<SimulatorArg> for Simulator {
    fn from(s: SimulatorArg) -> Self {
        match s {
            SimulatorArg::Full => Simulator::Full,
            SimulatorArg::Reduced => Simulator::Reduced,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate measurement records and block-weight paths.
    Simulate {
        /// Configuration file with a [model] section.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        traj: usize,
        /// Horizon.
        #[arg(long = "T")]
        horizon: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "full")]
        simulator: SimulatorArg,
        #[arg(long, default_value_t = 101)]
        checkpoints: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the estimation loop on simulated or stored records.
    Estimate {
        /// Configuration file with [model], [grid] and optionally [campaign].
        #[arg(long)]
        config: PathBuf,
        /// Directory of record files to replay.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        traj: Option<usize>,
        #[arg(long = "T")]
        horizon: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        simulator: Option<SimulatorArg>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Report separation constants, rate tables and grid conditions.
    Rates {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Design and audit the estimator grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res =
        match cli.command {
            Command::Simulate {
                model,
                traj,
                horizon,
                dt,
                seed,
                simulator,
                checkpoints,
                out,
                jobs,
            } => {
                let opts = SimulateOptions {
                    config: model,
                    out: resolve_out_dir(out.as_deref()),
                    trajectories: traj,
                    horizon,
                    dt,
                    seed,
                    jobs,
                    simulator: simulator.into(),
                    checkpoints,
                };
                simulate_cmd(&opts).map(|m| {
                    println!("wrote {} files to {}", m.files.len(), opts.out.display());
                    0
                })
            }
            Command::Estimate {
                config,
                records,
                traj,
                horizon,
                dt,
                seed,
                simulator,
                out,
                jobs,
            } => {
                let opts = EstimateOptions {
                    config,
                    out: resolve_out_dir(out.as_deref()),
                    records,
                    jobs,
                    trajectories: traj,
                    horizon,
                    dt,
                    seed,
                    simulator: simulator.map(Into::into),
                };
                estimate_cmd(&opts).map(|(status, _)| match status {
                    EstimateStatus::Final { bracket, reason } => {
                        println!(
                            "final bracket [{:.16e}, {:.16e}] ({reason})",
                            bracket.0, bracket.1
                        );
                        0
                    }
                    EstimateStatus::InsufficientData { reason } => {
                        println!("insufficient data: {reason}");
                        EXIT_INSUFFICIENT
                    }
                })
            }
            Command::Rates { config, out } => rates_cmd(&config, &resolve_out_dir(out.as_deref()))
                .map(|(text, _)| {
                    print!("{text}");
                    0
                }),
            Command::Grid { config, out } => grid_cmd(&config, &resolve_out_dir(out.as_deref()))
                .map(|(text, _)| {
                    print!("{text}");
                    0
                }),
        };
    match res {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
