mod config;
mod error;
mod report;
mod run;
mod units;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spinfluor_core::lattice::angle_sweep;

use crate::config::{Structure, ThetaRange};
use crate::error::CliError;

/// Simulate and analyse single-spin photon-counting experiments.
#[derive(Parser, Debug)]
#[command(name = "spinfluor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the experiments of a config file and write a results directory.
    Run {
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Results directory; overrides the config `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Independent experiments run concurrently on this many threads.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Replace a non-empty results directory.
        #[arg(long)]
        force: bool,
    },
    /// Print the summary of a results directory and write summary.csv.
    Report {
        dir: PathBuf,
        /// CSV destination (default: <dir>/summary.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Point-dipole couplings of every lattice site over an angle range.
    LatticeSweep {
        /// Structure file, or `builtin:cawo4`.
        structure: String,
        /// In-plane angle range "lo:hi:n" in degrees.
        #[arg(long, allow_hyphen_values = true)]
        theta: String,
        /// Out-of-plane tilt in degrees.
        #[arg(long, allow_hyphen_values = true)]
        beta: f64,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn lattice_sweep(structure: &str, theta: &str, beta: f64, out: Option<PathBuf>) -> Result<(), CliError> {
    let s = Structure::parse(structure, std::path::Path::new("."))
        .map_err(|m| CliError::usage(format!("structure: {m}")))?;
    let t: ThetaRange = theta.parse().map_err(|m| CliError::usage(format!("--theta: {m}")))?;
    let model = run::load_structure(&s)?;
    let table = angle_sweep(&model, beta, (t.lo, t.hi), t.n)?;
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(run::SWEEP_HEADER)?;
    for r in run::sweep_rows(&table) {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            parallel,
            force,
        } => {
            let dir = run::run(&run::RunOptions {
                config,
                seed,
                out,
                parallel,
                force,
            })?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Report { dir, csv } => {
            print!("{}", report::report(&dir, csv)?);
            Ok(())
        }
        Command::LatticeSweep {
            structure,
            theta,
            beta,
            out,
        } => lattice_sweep(&structure, &theta, beta, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::usage(e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or(""));
            let _ = writeln!(std::io::stderr(), "{}", err.to_json());
            return ExitCode::from(err.exit_code());
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let _ = writeln!(std::io::stderr(), "{}", err.to_json());
            ExitCode::from(err.exit_code())
        }
    }
}
