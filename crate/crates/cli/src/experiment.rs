use std::path::{Path, PathBuf};
use std::time::Instant;

use calmocap_core::chain::SiteOffsets;
use calmocap_core::gait::metrics_csv;
use calmocap_core::inference::{fit, FitReport, FitResult, NoiseModel};
use calmocap_core::trajectory::VariationalTrajectory;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{analyze, Analysis, KinematicCalibration, KinematicSeries};
use crate::artifacts::{read_artifact, Manifest, OutputDir, Provenance};
use crate::error::{CliError, Stage, StageExt};
use crate::plot;
use crate::spec::{Dataset, ExperimentSpec, Source};

/// Offsets, noise model and report written next to the trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitSummary {
    pub report: FitReport,
    pub offsets: SiteOffsets,
    pub noise: NoiseModel,
}

#[derive(Debug)]
pub struct RunOutput {
    pub out: PathBuf,
    pub manifest: Manifest,
    pub fit: FitResult,
    pub analysis: Analysis,
}

struct Prepared {
    data: Dataset,
    dir: OutputDir,
}

fn prepare(spec: &ExperimentSpec) -> Result<Prepared, CliError> {
    spec.validate()?;
    let out = spec.out.clone().ok_or_else(|| CliError::config("no output directory given"))?;
    OutputDir::check(&out)?;
    let data = Dataset::load(spec)?;
    data.coordinates(&spec.analysis.monitored)?;
    spec.fit_config(data.chain.pose_dim()).validate().map_err(CliError::config)?;
    let dir = OutputDir::create(&out, Provenance { spec_hash: spec.hash(), seed: spec.seed })?;
    Ok(Prepared { data, dir })
}

/// Runs `stages`, then writes the manifest, plus the FAILED marker when a
/// stage failed.
fn finish<T>(dir: OutputDir, result: Result<T, CliError>) -> Result<(T, Manifest), CliError> {
    match result {
        Ok(value) => {
            let manifest = dir.finish(None).stage(Stage::Analysis)?;
            Ok((value, manifest))
        }
        Err(err) => {
            let _ = dir.finish(Some(&err));
            Err(err)
        }
    }
}

fn write_inputs(dir: &mut OutputDir, spec: &ExperimentSpec, data: &Dataset) -> std::io::Result<()> {
    dir.write_json("spec.json", "experiment_spec", &ExperimentSpec { out: None, ..spec.clone() })?;
    if let Some(scenario) = &data.scenario {
        dir.write_json("scenario.json", "gait_scenario", scenario)?;
    }
    Ok(())
}

/// Simulates or loads the data, fits, analyzes and writes every artifact
/// into the spec's output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunOutput, CliError> {
    let Prepared { data, mut dir } = prepare(spec)?;
    let result = (|| {
        write_inputs(&mut dir, spec, &data).stage(Stage::Fit)?;
        let config = spec.fit_config(data.chain.pose_dim());
        let fitted = fit(&data.observations, &data.chain, &data.rig, &config, spec.seed).stage(Stage::Fit)?;
        let timing = json!({ "fit_wall_time_s": fitted.report.wall_time_s });
        dir.write_unlisted(crate::artifacts::TIMING, format!("{timing}\n").as_bytes()).stage(Stage::Fit)?;
        write_fit(&mut dir, &fitted).stage(Stage::Fit)?;
        let analysis = analyze(&fitted.trajectory, &fitted.offsets, &data, &spec.analysis, spec.seed)?;
        write_analysis(&mut dir, &spec.name, &analysis).stage(Stage::Analysis)?;
        Ok((fitted, analysis))
    })();
    let out = dir.root().to_path_buf();
    let ((fit, analysis), manifest) = finish(dir, result)?;
    Ok(RunOutput { out, manifest, fit, analysis })
}

fn write_fit(dir: &mut OutputDir, fitted: &FitResult) -> std::io::Result<()> {
    dir.write_json("trajectory.json", "variational_trajectory", &fitted.trajectory)?;
    let summary = FitSummary {
        report: FitReport { wall_time_s: 0.0, ..fitted.report.clone() },
        offsets: fitted.offsets.clone(),
        noise: fitted.noise,
    };
    dir.write_json("fit_report.json", "fit_report", &summary)?;
    dir.write_csv("fit_trace.csv", &fitted.report.trace_csv())
}

fn curve_path(label: &str) -> String {
    format!("curves/{label}.csv")
}

/// Writes reports and CSVs, then draws the figures from the CSVs on disk.
pub fn write_analysis(dir: &mut OutputDir, trial: &str, a: &Analysis) -> std::io::Result<()> {
    dir.write_json("calibration_kinematic.json", "kinematic_calibration", &a.kinematic)?;
    dir.write_json("calibration_spatial.json", "spatial_calibration", &a.spatial)?;
    let mut coverage = String::from("label,level,coverage\n");
    let mut kinematic_curves = Vec::new();
    for r in &a.kinematic.coordinates {
        dir.write_csv(&curve_path(&format!("kinematic_{}", r.label)), &r.curve_csv())?;
        kinematic_curves.push(r.label.clone());
    }
    let spatial: Vec<_> = [&a.spatial.step, &a.spatial.stride].into_iter().flatten().collect();
    for r in &spatial {
        dir.write_csv(&curve_path(&r.label), &r.curve_csv())?;
    }
    for r in a.kinematic.coordinates.iter().chain(spatial.iter().copied()) {
        for c in &r.coverage {
            coverage.push_str(&format!("{},{},{}\n", r.label, c.level, c.coverage));
        }
    }
    dir.write_csv("coverage.csv", &coverage)?;
    dir.write_csv("metrics.csv", &metrics_csv(trial, &a.metrics.metrics))?;
    dir.write_json("strata.json", "uncertainty_strata", &json!({ "strata": a.strata, "diagnostics": a.diagnostics }))?;
    let mut bins = String::from("uncertainty_mean,mae,ci_low,ci_high,n\n");
    for b in a.strata.iter().flat_map(|s| &s.bins) {
        bins.push_str(&format!("{},{},{},{},{}\n", b.uncertainty_mean, b.mae, b.ci95[0], b.ci95[1], b.n));
    }
    dir.write_csv("error_vs_uncertainty.csv", &bins)?;
    let mut sigma = String::from("t,sigma_median\n");
    for (t, s) in a.kinematics.times.iter().zip(a.kinematics.frame_sigma()) {
        sigma.push_str(&format!("{t},{s}\n"));
    }
    dir.write_csv("frame_sigma.csv", &sigma)?;

    let read = |rel: &str| dir.read_to_string(rel);
    let kin_text = kinematic_curves.iter().map(|l| read(&curve_path(&format!("kinematic_{l}")))).collect::<std::io::Result<Vec<_>>>()?;
    let spatial_text = spatial.iter().map(|r| read(&curve_path(&r.label))).collect::<std::io::Result<Vec<_>>>()?;
    let panels = vec![
        ("kinematic", kinematic_curves.iter().map(String::as_str).zip(kin_text.iter().map(String::as_str)).collect()),
        ("spatial", spatial.iter().map(|r| r.label.as_str()).zip(spatial_text.iter().map(String::as_str)).collect()),
    ];
    let pp = plot::calibration_pp(&panels);
    let evu = plot::error_vs_uncertainty(&read("error_vs_uncertainty.csv")?);
    let cov = plot::coverage_bars(&read("coverage.csv")?);
    dir.write_bytes("plots/calibration_pp.svg", pp.as_bytes())?;
    dir.write_bytes("plots/error_vs_uncertainty.svg", evu.as_bytes())?;
    dir.write_bytes("plots/coverage.svg", cov.as_bytes())
}

/// Re-analyzes a previous run's fit (`trajectory.json`, `fit_report.json`
/// in `fit_dir`) against the spec's dataset.
pub fn calibrate_fit(spec: &ExperimentSpec, fit_dir: &Path) -> Result<(Analysis, Manifest), CliError> {
    spec.validate()?;
    let traj: VariationalTrajectory = read_artifact(&fit_dir.join("trajectory.json"))?;
    let summary: FitSummary = read_artifact(&fit_dir.join("fit_report.json"))?;
    let Prepared { data, mut dir } = prepare(spec)?;
    let result = (|| {
        write_inputs(&mut dir, spec, &data).stage(Stage::Analysis)?;
        let analysis = analyze(&traj, &summary.offsets, &data, &spec.analysis, spec.seed)?;
        write_analysis(&mut dir, &spec.name, &analysis).stage(Stage::Analysis)?;
        Ok(analysis)
    })();
    finish(dir, result)
}

/// Writes a simulated dataset that a `dataset` source can read back.
pub fn simulate_dataset(spec: &ExperimentSpec) -> Result<Manifest, CliError> {
    if matches!(spec.source, Source::Dataset { .. }) {
        return Err(CliError::config("simulate needs a fixture or scenario source"));
    }
    let Prepared { data, mut dir } = prepare(spec)?;
    let result = (|| -> Result<(), CliError> {
        let mut write = |rel: &str, text: String| dir.write_bytes(rel, text.as_bytes()).stage(Stage::Config);
        write("chain.json", pretty(&data.chain))?;
        write("rig.json", pretty(&data.rig))?;
        write("truth.json", pretty(&data.truth))?;
        if let Some(s) = &data.scenario {
            write("scenario.json", pretty(s))?;
        }
        write("observations.jsonl", data.observations.to_jsonl())
    })();
    finish(dir, result).map(|(_, m)| m)
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_ece: f64,
    /// Internal ECE at the final iterate.
    pub internal_ece: Option<f64>,
    /// Mean over monitored coordinates of the kinematic ECE.
    pub external_ece: Option<f64>,
    pub median_sigma: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub manifest: Option<Manifest>,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("lambda_ece,internal_ece,external_ece,median_sigma,error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.lambda_ece,
                opt(r.internal_ece),
                opt(r.external_ece),
                opt(r.median_sigma),
                r.error.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        out
    }

    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }
}

fn sweep_row(spec: &ExperimentSpec, data: &Dataset, lambda: f64) -> Result<SweepRow, CliError> {
    let mut config = spec.fit_config(data.chain.pose_dim());
    config.weights.lambda_ece = lambda;
    let fitted = fit(&data.observations, &data.chain, &data.rig, &config, spec.seed).stage(Stage::Fit)?;
    let series = KinematicSeries::extract(&fitted.trajectory, data, &spec.analysis.monitored)?;
    let cal = KinematicCalibration::from_series(&series, &spec.analysis.nominal_levels)?;
    Ok(SweepRow {
        lambda_ece: lambda,
        internal_ece: fitted.report.breakdown.terms.internal_ece,
        external_ece: Some(cal.ece_mean),
        median_sigma: Some(cal.median_sigma),
        error: None,
    })
}

/// Fits once per `values` entry and tabulates internal ECE, external
/// kinematic ECE and median σ. Failed fits are recorded in their row.
pub fn sweep_lambda_ece(spec: &ExperimentSpec, values: &[f64]) -> Result<SweepReport, CliError> {
    if values.is_empty() || values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(CliError::config("λ_ece values must be a nonempty list of finite nonnegative numbers"));
    }
    let Prepared { data, mut dir } = prepare(spec)?;
    let started = Instant::now();
    let rows: Vec<SweepRow> = values
        .iter()
        .map(|&lambda| {
            sweep_row(spec, &data, lambda).unwrap_or_else(|e| SweepRow {
                lambda_ece: lambda,
                internal_ece: None,
                external_ece: None,
                median_sigma: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    let mut report = SweepReport { rows, manifest: None };
    let result = (|| {
        write_inputs(&mut dir, spec, &data).stage(Stage::Analysis)?;
        dir.write_json("sweep.json", "lambda_ece_sweep", &report.rows).stage(Stage::Analysis)?;
        dir.write_csv("sweep.csv", &report.csv()).stage(Stage::Analysis)?;
        let timing = json!({ "sweep_wall_time_s": started.elapsed().as_secs_f64() });
        dir.write_unlisted(crate::artifacts::TIMING, format!("{timing}\n").as_bytes()).stage(Stage::Analysis)?;
        match report.rows.iter().find_map(|r| r.error.clone()) {
            Some(e) => Err(CliError::new(Stage::Fit, format!("sweep row failed: {e}"))),
            None => Ok(()),
        }
    })();
    match finish(dir, result) {
        Ok(((), manifest)) => report.manifest = Some(manifest),
        Err(e) if e.stage == Stage::Fit => {}
        Err(e) => return Err(e),
    }
    Ok(report)
}
