//! bdproc: certify rate bounds, run seeded birth-death ensembles, and
//! audit the outputs against the certified inequalities.
//!
//! Exit codes: 0 success, 1 audit or certification assertion failed,
//! 2 usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bdproc::cli::{cmd_audit, cmd_certify, cmd_simulate, AuditKind, CliError, SimulateOverrides};
use bdproc::config::AlgorithmName;

#[derive(Parser)]
#[command(name = "bdproc", version, about = "certified spatial birth-death simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute every certificate a config needs and write certificates.json.
    Certify {
        /// TOML config file
        config: PathBuf,
        /// Output directory (defaults to the config's [output] dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify, run the ensemble, and write manifest + observables.
    Simulate {
        /// TOML config file, or a manifest.json to reproduce a prior run
        config: PathBuf,
        /// Override the number of replicates
        #[arg(long)]
        replicates: Option<usize>,
        /// Override the master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the sampling algorithm
        #[arg(long, value_parser = parse_algorithm)]
        algorithm: Option<AlgorithmName>,
        /// Write per-replicate event logs (required by the audits)
        #[arg(long)]
        emit_events: bool,
        /// Override the output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check a finished run's logs against the certified inequalities.
    Audit {
        /// Directory holding manifest.json and event logs
        dir: PathBuf,
        /// Which inequality to audit
        #[arg(long, value_parser = parse_kind)]
        kind: AuditKind,
        /// Use this certificates.json instead of the manifest's copy
        /// (supermartingale audit only)
        #[arg(long)]
        certificates: Option<PathBuf>,
    },
}

fn parse_algorithm(s: &str) -> Result<AlgorithmName, String> {
    s.parse()
}

fn parse_kind(s: &str) -> Result<AuditKind, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), CliError> = match cli.command {
        Command::Certify { config, out } => cmd_certify(&config, out.as_deref()),
        Command::Simulate {
            config,
            replicates,
            seed,
            algorithm,
            emit_events,
            out,
        } => {
            let ov = SimulateOverrides {
                replicates,
                seed,
                algorithm,
                emit_events,
                out,
            };
            cmd_simulate(&config, &ov).map(|_| ())
        }
        Command::Audit {
            dir,
            kind,
            certificates,
        } => cmd_audit(&dir, kind, certificates.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
