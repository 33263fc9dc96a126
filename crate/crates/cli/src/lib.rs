//! Experiment runner: simulation, fitting, calibration analysis and
//! plot-ready artifacts with a hashed manifest.

pub mod analysis;
pub mod artifacts;
pub mod error;
pub mod experiment;
pub mod plot;
pub mod spec;

pub use error::{CliError, Stage};
pub use experiment::{calibrate_fit, run_experiment, simulate_dataset, sweep_lambda_ece, RunOutput, SweepReport, SweepRow};
pub use spec::{AnalysisConfig, Dataset, ExperimentSpec, Source};
