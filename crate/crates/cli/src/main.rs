//! `qprepair` command-line front end.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::failure::Failure;

#[derive(Debug, Parser, Serialize)]
#[command(name = "qprepair", version, about = "Low-rank QP repair with margin and Lipschitz certificates")]
struct Cli {
    /// Seed for every random draw the subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for sample-parallel work; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic problem bundle and a separate aux bundle.
    Synth(commands::SynthArgs),
    /// Print the gap sensitivity norm of every sample in a set.
    Gsn(commands::GsnArgs),
    /// Fine-tune the repair layer and head for sensitivity, then relabel the remain set.
    GsnFt(commands::GsnFtArgs),
    /// Run the iterative QP repair.
    Repair(commands::RepairArgs),
    /// Issue certificates for a converged repair.
    Certify(commands::CertifyArgs),
    /// Expanding-radius Monte Carlo stress test of the certificates.
    Stress(commands::StressArgs),
    /// Accuracy grouped by distance to the nearest repaired sample.
    Proximity(commands::ProximityArgs),
    /// Repeat the repair across ranks or set sizes.
    Sweep(commands::SweepArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Gsn(_) => "gsn",
            Command::GsnFt(_) => "gsn-ft",
            Command::Repair(_) => "repair",
            Command::Certify(_) => "certify",
            Command::Stress(_) => "stress",
            Command::Proximity(_) => "proximity",
            Command::Sweep(_) => "sweep",
        }
    }
}

/// Flags every subcommand shares, handed to the command bodies.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct RunConfig<'a> {
    subcommand: &'static str,
    version: &'static str,
    seed: u64,
    threads: usize,
    out: &'a PathBuf,
    args: &'a Command,
}

fn run(cli: &Cli) -> Result<(), Failure> {
    commands::validate(&cli.command)?;
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Failure::internal(format!("thread pool: {e}")))?;
    }
    let config = RunConfig {
        subcommand: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cli.seed,
        threads: cli.threads,
        out: &cli.out,
        args: &cli.command,
    };
    let path = cli.out.join(format!("run_config.{}.json", cli.command.name()));
    qprepair::write_report(&config, &path)?;

    let g = Globals {
        seed: cli.seed,
        out: cli.out.clone(),
    };
    match &cli.command {
        Command::Synth(a) => commands::synth(a, &g),
        Command::Gsn(a) => commands::gsn(a, &g),
        Command::GsnFt(a) => commands::gsn_ft(a, &g),
        Command::Repair(a) => commands::repair(a, &g),
        Command::Certify(a) => commands::certify(a, &g),
        Command::Stress(a) => commands::stress(a, &g),
        Command::Proximity(a) => commands::proximity(a, &g),
        Command::Sweep(a) => commands::sweep(a, &g),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments");
            return Failure::invalid(line.trim_start_matches("error: ")).report();
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
