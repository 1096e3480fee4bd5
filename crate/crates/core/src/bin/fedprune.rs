use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedprune::experiment::{cmd_run, cmd_sweep, ExperimentSpec, SweepAxis};
use fedprune::verify::run_checks;
use fedprune::PruneError;

/// Thread count override for the worker pool (falls back to RAYON_NUM_THREADS).
const THREADS_ENV: &str = "FEDPRUNE_THREADS";

#[derive(Parser)]
#[command(name = "fedprune", version, about = "Federated unstructured pruning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment grid.
    Run {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the grid across client counts or calibration sample counts.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; empty runs nothing.
        #[arg(long, default_value = "")]
        values: String,
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance checks.
    Verify {
        #[arg(long)]
        filter: Option<String>,
    },
}

fn exit_code(err: &PruneError) -> u8 {
    match err {
        PruneError::Spec(_) => 2,
        _ => 3,
    }
}

fn parse_values(raw: &str) -> Result<Vec<usize>, PruneError> {
    raw.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse().map_err(|_| PruneError::Spec(format!("sweep value {v:?} is not a count"))))
        .collect()
}

fn configure_threads() -> Result<(), PruneError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .map_err(|_| PruneError::Spec(format!("{THREADS_ENV}={raw:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| PruneError::Spec(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Run { spec, out } => ExperimentSpec::load(&spec).and_then(|s| cmd_run(&s, out.as_deref())),
        Command::Sweep { axis, values, spec, out } => {
            parse_values(&values).and_then(|values| {
                ExperimentSpec::load(&spec).and_then(|s| cmd_sweep(&s, axis, &values, out.as_deref()))
            })
        }
        Command::Verify { filter } => {
            let results = run_checks(filter.as_deref());
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{status} {:<20} {:>7.2}s  {}", r.name, r.seconds, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            return if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match result {
        Ok(out) => {
            println!("{} rows -> {}", out.rows.len(), out.csv_path.display());
            println!("archive -> {}", out.json_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
