use calmocap_core::calibration::{coverage_at_nominal, kinematic_pit, CalibrationReport, CoverageEntry, PitKind, PitSet};
use calmocap_core::chain::SiteOffsets;
use calmocap_core::gait::{metric_posterior, stratify_by_uncertainty, MetricKind, MetricOptions, MetricPosterior, StrataSummary};
use calmocap_core::stats;
use calmocap_core::trajectory::VariationalTrajectory;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Stage, StageExt};
use crate::spec::{AnalysisConfig, Dataset};

/// Posterior mean, reference and marginal σ of the monitored coordinates
/// at every reference frame, `frames × coordinates`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicSeries {
    pub names: Vec<String>,
    pub times: Vec<f64>,
    pub predicted: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl KinematicSeries {
    pub fn extract(traj: &VariationalTrajectory, data: &Dataset, names: &[String]) -> Result<Self, CliError> {
        let coords = data.coordinates(names)?;
        let (mut predicted, mut reference, mut sigma) = (Vec::new(), Vec::new(), Vec::new());
        for (t, pose) in data.truth.times.iter().zip(&data.truth.poses) {
            let m = traj.evaluate(*t).stage(Stage::Analysis)?;
            let s = m.sigma();
            predicted.push(coords.iter().map(|&c| m.mean[c]).collect());
            reference.push(coords.iter().map(|&c| pose[c]).collect());
            sigma.push(coords.iter().map(|&c| s[c]).collect());
        }
        Ok(Self { names: names.to_vec(), times: data.truth.times.clone(), predicted, reference, sigma })
    }

    /// Errors and scales of coordinate `j`.
    pub fn column(&self, j: usize) -> (Vec<f64>, Vec<f64>) {
        let e = self.predicted.iter().zip(&self.reference).map(|(p, r)| p[j] - r[j]).collect();
        let s = self.sigma.iter().map(|s| s[j]).collect();
        (e, s)
    }

    /// Median σ over the monitored coordinates, per frame.
    pub fn frame_sigma(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| stats::median(s)).collect()
    }

    pub fn median_sigma(&self) -> f64 {
        stats::median(&self.sigma.iter().flatten().copied().collect::<Vec<_>>())
    }
}

/// Kinematic calibration report with coverage at `levels`.
pub fn kinematic_report(label: &str, errors: &[f64], scales: &[f64], levels: &[f64]) -> calmocap_core::Result<CalibrationReport> {
    let mut report = CalibrationReport::from_pit(label, &kinematic_pit(errors, scales)?);
    report.coverage = levels
        .iter()
        .zip(coverage_at_nominal(errors, scales, levels)?)
        .map(|(&level, coverage)| CoverageEntry { level, coverage })
        .collect();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicCalibration {
    pub coordinates: Vec<CalibrationReport>,
    /// All monitored coordinates and frames pooled.
    pub pooled: CalibrationReport,
    /// Mean of the per-coordinate ECE values.
    pub ece_mean: f64,
    pub median_sigma: f64,
}

impl KinematicCalibration {
    pub fn from_series(series: &KinematicSeries, levels: &[f64]) -> Result<Self, CliError> {
        let mut coordinates = Vec::new();
        let (mut all_e, mut all_s) = (Vec::new(), Vec::new());
        for (j, name) in series.names.iter().enumerate() {
            let (e, s) = series.column(j);
            coordinates.push(kinematic_report(name, &e, &s, levels).stage(Stage::Analysis)?);
            all_e.extend(e);
            all_s.extend(s);
        }
        let pooled = kinematic_report("pooled", &all_e, &all_s, levels).stage(Stage::Analysis)?;
        let ece_mean = stats::mean(&coordinates.iter().map(|r| r.ece).collect::<Vec<_>>());
        Ok(Self { coordinates, pooled, ece_mean, median_sigma: series.median_sigma() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialCalibration {
    pub step: Option<CalibrationReport>,
    pub stride: Option<CalibrationReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub kinematics: KinematicSeries,
    pub kinematic: KinematicCalibration,
    pub spatial: SpatialCalibration,
    pub metrics: MetricPosterior,
    /// Step-length strata; `None` when there are too few steps.
    pub strata: Option<StrataSummary>,
    pub diagnostics: Vec<String>,
}

/// Calibration of a fitted trajectory against the dataset's reference.
pub fn analyze(
    traj: &VariationalTrajectory,
    offsets: &SiteOffsets,
    data: &Dataset,
    config: &AnalysisConfig,
    seed: u64,
) -> Result<Analysis, CliError> {
    let kinematics = KinematicSeries::extract(traj, data, &config.monitored)?;
    let kinematic = KinematicCalibration::from_series(&kinematics, &config.nominal_levels)?;
    let options = MetricOptions { samples: config.metric_samples, stride_convention: config.stride_convention };
    let truth = &data.truth;
    let metrics = metric_posterior(traj, &data.chain, offsets, &truth.events, truth.heel_sites, &truth.walkway, &options, seed)
        .stage(Stage::Analysis)?;
    let mut diagnostics = metrics.diagnostics.clone();
    let spatial_report = |kind: MetricKind, label: &str| -> Result<Option<CalibrationReport>, CliError> {
        let pits: Vec<f64> = metrics.metrics.iter().filter(|m| m.kind == kind).map(|m| m.pit).collect();
        if pits.is_empty() {
            return Ok(None);
        }
        let pit = PitSet::new(PitKind::Spatial, pits).stage(Stage::Analysis)?;
        let mut report = CalibrationReport::from_pit(label, &pit);
        // Central-interval coverage: the truth lies inside the central
        // `level` mass of the posterior when |2u − 1| ≤ level.
        report.coverage = config
            .nominal_levels
            .iter()
            .map(|&level| {
                let inside = pit.values().iter().filter(|u| (2.0 * *u - 1.0).abs() <= level).count();
                CoverageEntry { level, coverage: inside as f64 / pit.len() as f64 }
            })
            .collect();
        Ok(Some(report))
    };
    let spatial = SpatialCalibration { step: spatial_report(MetricKind::Step, "step")?, stride: spatial_report(MetricKind::Stride, "stride")? };
    let steps: Vec<_> = metrics.metrics.iter().filter(|m| m.kind == MetricKind::Step).cloned().collect();
    let strata = match stratify_by_uncertainty(&steps, &config.strata) {
        Ok(s) => Some(s),
        Err(e) => {
            diagnostics.push(format!("strata skipped: {e}"));
            None
        }
    };
    Ok(Analysis { kinematics, kinematic, spatial, metrics, strata, diagnostics })
}
