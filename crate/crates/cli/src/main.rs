use std::path::PathBuf;
use std::process::ExitCode;

use calmocap::{calibrate_fit, run_experiment, simulate_dataset, sweep_lambda_ece, CliError, ExperimentSpec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "calmocap", about = "Calibrated markerless motion capture experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the spec's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate, fit and analyze.
    Run(Common),
    /// Fit once per λ_ece value and tabulate calibration.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ_ece values.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
        lambdas: Vec<f64>,
    },
    /// Write the simulated dataset only.
    Simulate(Common),
    /// Analyze a previous run's fit against the spec's dataset.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Output directory of an earlier `run`.
        #[arg(long)]
        fit: PathBuf,
    },
}

fn load(c: &Common) -> Result<ExperimentSpec, CliError> {
    let mut spec = ExperimentSpec::load(&c.spec)?;
    if let Some(seed) = c.seed {
        spec.seed = seed;
    }
    if let Some(out) = &c.out {
        spec.out = Some(out.clone());
    }
    if spec.out.is_none() {
        spec.out = Some(PathBuf::from("out").join(&spec.name));
    }
    Ok(spec)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(c) => {
            let run = run_experiment(&load(&c)?)?;
            let k = &run.analysis.kinematic;
            println!("wrote {} files to {}", run.manifest.files.len(), run.out.display());
            println!("kinematic ECE (mean over monitored) {:.3}, median σ {:.4} rad", k.ece_mean, k.median_sigma);
            for r in [&run.analysis.spatial.step, &run.analysis.spatial.stride].into_iter().flatten() {
                println!("{} ECE {:.3} (n = {})", r.label, r.ece, r.n);
            }
        }
        Command::Sweep { common, lambdas } => {
            let report = sweep_lambda_ece(&load(&common)?, &lambdas)?;
            print!("{}", report.csv());
            if report.failed() {
                return Err(CliError::new(calmocap::Stage::Fit, "one or more sweep fits failed"));
            }
        }
        Command::Simulate(c) => {
            let manifest = simulate_dataset(&load(&c)?)?;
            println!("wrote {} files", manifest.files.len());
        }
        Command::Calibrate { common, fit } => {
            let (analysis, manifest) = calibrate_fit(&load(&common)?, &fit)?;
            println!("wrote {} files; kinematic ECE {:.3}", manifest.files.len(), analysis.kinematic.ece_mean);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
