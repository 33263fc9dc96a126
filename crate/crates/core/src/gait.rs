//! Spatiotemporal gait metrics with posterior uncertainty.
//!
//! Walkway frame: `x` along the direction of progression, `y` lateral,
//! `z` vertical. Lengths are reported in millimetres.

use serde::{Deserialize, Serialize};

use crate::calibration::spatial_pit;
use crate::chain::{KinematicChain, SiteOffsets};
use crate::error::{Error, Result};
use crate::inference::stream_seed;
use crate::stats;
use crate::trajectory::VariationalTrajectory;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Foot {
    Left,
    Right,
}

impl Foot {
    pub fn as_str(self) -> &'static str {
        match self {
            Foot::Left => "left",
            Foot::Right => "right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StanceSource {
    Truth,
    Detector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StancePhase {
    pub foot: Foot,
    pub contact: f64,
    pub toe_off: f64,
    /// Median frame time within `[contact, toe_off]`.
    pub heel_center: f64,
    pub source: StanceSource,
}

impl StancePhase {
    pub fn validate(&self) -> Result<()> {
        if !(self.contact < self.toe_off) {
            return Err(Error::invalid(format!("stance contact {} not before toe-off {}", self.contact, self.toe_off)));
        }
        if !(self.contact..=self.toe_off).contains(&self.heel_center) {
            return Err(Error::invalid("heel-center time outside the stance interval"));
        }
        Ok(())
    }
}

/// Median of the frame times falling inside `[start, end]`.
pub fn median_frame_time(times: &[f64], start: f64, end: f64) -> Option<f64> {
    let inside: Vec<f64> = times.iter().copied().filter(|t| (start..=end).contains(t)).collect();
    (!inside.is_empty()).then(|| inside[(inside.len() - 1) / 2])
}

/// Planar rigid map from world to walkway coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkwayTransform {
    /// Rotation angle applied to world `xy` [rad].
    pub angle: f64,
    /// World point mapped to the walkway origin.
    pub origin: [f64; 2],
}

impl WalkwayTransform {
    pub fn identity() -> Self {
        Self { angle: 0.0, origin: [0.0, 0.0] }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        let (x, y) = (p[0] - self.origin[0], p[1] - self.origin[1]);
        [c * x - s * y, s * x + c * y, p[2]]
    }
}

/// Least-squares line through the ground projections of heel positions
/// (given in time order) defining the walkway's lengthwise axis.
pub fn align_to_walkway(heels: &[[f64; 3]]) -> Result<WalkwayTransform> {
    if heels.len() < 2 {
        return Err(Error::Alignment(format!("need at least 2 heel positions, got {}", heels.len())));
    }
    let n = heels.len() as f64;
    let cx = heels.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = heels.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in heels {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx + syy < 1e-18 {
        return Err(Error::Alignment("heel positions coincide".into()));
    }
    let mut theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (first, last) = (heels[0], heels[heels.len() - 1]);
    if (last[0] - first[0]) * theta.cos() + (last[1] - first[1]) * theta.sin() < 0.0 {
        theta += std::f64::consts::PI;
    }
    let angle = -theta;
    // Origin on the fitted line at the first heel.
    let t = (first[0] - cx) * theta.cos() + (first[1] - cy) * theta.sin();
    let origin = [cx + t * theta.cos(), cy + t * theta.sin()];
    Ok(WalkwayTransform { angle, origin })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Step,
    Stride,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrideConvention {
    #[default]
    Lengthwise,
    Euclidean,
}

/// Lengthwise distance between heel centres of consecutive opposite feet.
pub fn step_length(prev_foot: Foot, prev: [f64; 2], next_foot: Foot, next: [f64; 2]) -> Result<f64> {
    if prev_foot == next_foot {
        return Err(Error::Contract("step length needs opposite feet".into()));
    }
    Ok((next[0] - prev[0]).abs())
}

/// Distance between consecutive heel centres of the same foot.
pub fn stride_length(
    prev_foot: Foot,
    prev: [f64; 2],
    next_foot: Foot,
    next: [f64; 2],
    convention: StrideConvention,
) -> Result<f64> {
    if prev_foot != next_foot {
        return Err(Error::Contract("stride length needs the same foot".into()));
    }
    Ok(match convention {
        StrideConvention::Lengthwise => (next[0] - prev[0]).abs(),
        StrideConvention::Euclidean => ((next[0] - prev[0]).powi(2) + (next[1] - prev[1]).powi(2)).sqrt(),
    })
}

/// Posterior distribution of one step or stride length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitMetricSample {
    pub kind: MetricKind,
    /// Foot of the later heel strike.
    pub foot: Foot,
    /// Heel-center time of the later event.
    pub time: f64,
    #[serde(skip)]
    pub samples: Vec<f64>,
    pub median: f64,
    pub ground_truth: f64,
    pub uncertainty: f64,
    pub error: f64,
    pub pit: f64,
}

impl GaitMetricSample {
    pub fn from_samples(kind: MetricKind, foot: Foot, time: f64, samples: Vec<f64>, ground_truth: f64) -> Result<Self> {
        let median = stats::median(&samples);
        let pit = spatial_pit(&samples, ground_truth)?;
        Ok(Self {
            kind,
            foot,
            time,
            median,
            ground_truth,
            uncertainty: stats::std_dev(&samples),
            error: (ground_truth - median).abs(),
            pit,
            samples,
        })
    }
}

/// Heel-strike event used for metric computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeelEvent {
    pub stance: StancePhase,
    /// Reference heel position in world coordinates [m].
    pub reference: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub samples: usize,
    pub stride_convention: StrideConvention,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { samples: 1000, stride_convention: StrideConvention::Lengthwise }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricPosterior {
    pub metrics: Vec<GaitMetricSample>,
    pub walkway: Option<WalkwayTransform>,
    pub diagnostics: Vec<String>,
}

/// Step and stride posteriors from heel-site samples at each heel-center
/// time. `heel_sites` holds the chain site indices of the left and right
/// heel. Reference values use `reference_frame`; posterior samples use a
/// walkway frame fitted to the posterior-mean heel positions.
#[allow(clippy::too_many_arguments)]
pub fn metric_posterior(
    traj: &VariationalTrajectory,
    chain: &KinematicChain,
    offsets: &SiteOffsets,
    events: &[HeelEvent],
    heel_sites: [usize; 2],
    reference_frame: &WalkwayTransform,
    options: &MetricOptions,
    seed: u64,
) -> Result<MetricPosterior> {
    if options.samples < 2 {
        return Err(Error::invalid("metric posterior needs at least 2 samples"));
    }
    let mut out = MetricPosterior::default();
    let mut ordered: Vec<&HeelEvent> = events.iter().collect();
    ordered.sort_by(|a, b| a.stance.heel_center.total_cmp(&b.stance.heel_center));

    // World heel samples per usable event.
    let mut usable: Vec<(&HeelEvent, Vec<[f64; 3]>, [f64; 3])> = Vec::new();
    for (i, ev) in ordered.iter().enumerate() {
        let moment = match traj.evaluate(ev.stance.heel_center) {
            Ok(m) => m,
            Err(e) => {
                out.diagnostics.push(format!("event {i} skipped: {e}"));
                continue;
            }
        };
        let site = heel_sites[matches!(ev.stance.foot, Foot::Right) as usize];
        let draws = moment.sample(options.samples, stream_seed(seed, 0x6A17, i as u64));
        let heel = |pose: &[f64]| -> Result<[f64; 3]> {
            Ok(crate::chain::forward_kinematics_pose(chain, pose, offsets)?[site])
        };
        let samples = draws.iter().map(|d| heel(d)).collect::<Result<Vec<_>>>()?;
        let mean = heel(&moment.mean)?;
        usable.push((ev, samples, mean));
    }
    if usable.len() < 2 {
        out.diagnostics.push("fewer than two usable heel events".into());
        return Ok(out);
    }
    let walkway = align_to_walkway(&usable.iter().map(|u| u.2).collect::<Vec<_>>())?;
    let to_mm = |frame: &WalkwayTransform, p: [f64; 3]| {
        let q = frame.apply(p);
        [q[0] * 1000.0, q[1] * 1000.0]
    };
    for j in 1..usable.len() {
        for (kind, back) in [(MetricKind::Step, 1), (MetricKind::Stride, 2)] {
            if j < back {
                continue;
            }
            let (a, sa, _) = &usable[j - back];
            let (b, sb, _) = &usable[j];
            let feet_ok = match kind {
                MetricKind::Step => a.stance.foot != b.stance.foot,
                MetricKind::Stride => a.stance.foot == b.stance.foot,
            };
            if !feet_ok {
                continue;
            }
            let metric = |pa: [f64; 2], pb: [f64; 2]| match kind {
                MetricKind::Step => step_length(a.stance.foot, pa, b.stance.foot, pb),
                MetricKind::Stride => stride_length(a.stance.foot, pa, b.stance.foot, pb, options.stride_convention),
            };
            let samples = sa
                .iter()
                .zip(sb)
                .map(|(pa, pb)| metric(to_mm(&walkway, *pa), to_mm(&walkway, *pb)))
                .collect::<Result<Vec<_>>>()?;
            let truth = metric(to_mm(reference_frame, a.reference), to_mm(reference_frame, b.reference))?;
            out.metrics.push(GaitMetricSample::from_samples(kind, b.stance.foot, b.stance.heel_center, samples, truth)?);
        }
    }
    out.walkway = Some(walkway);
    Ok(out)
}

/// Per-step metric table as CSV.
pub fn metrics_csv(trial: &str, metrics: &[GaitMetricSample]) -> String {
    let mut out = String::from("trial,foot,kind,median_mm,truth_mm,uncertainty_mm,error_mm,pit\n");
    for m in metrics {
        let kind = match m.kind {
            MetricKind::Step => "step",
            MetricKind::Stride => "stride",
        };
        out.push_str(&format!(
            "{trial},{},{kind},{},{},{},{},{}\n",
            m.foot.as_str(),
            m.median,
            m.ground_truth,
            m.uncertainty,
            m.error,
            m.pit
        ));
    }
    out
}

/// Angle series of one trial, `frames × joints`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSeries {
    pub participant: String,
    pub predicted: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub participant: String,
    pub joint: String,
    /// Mean over trials of the trial-mean of `predicted − reference`.
    pub bias: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub rows: Vec<BiasRow>,
    pub diagnostics: Vec<String>,
}

impl BiasTable {
    pub fn get(&self, participant: &str, joint: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.participant == participant && r.joint == joint).map(|r| r.bias)
    }
}

/// Per-participant systematic offsets and bias-corrected predictions.
///
/// Sign convention: `bias = predicted − reference` (averaged), and the
/// corrected series is `predicted − bias`. Participants listed in
/// `participants` without any trial are reported in the diagnostics.
pub fn bias_correct(
    trials: &[TrialSeries],
    participants: &[String],
    joint_names: &[String],
) -> Result<(BiasTable, Vec<Vec<Vec<f64>>>)> {
    let j = joint_names.len();
    let mut trial_means: Vec<Vec<f64>> = Vec::with_capacity(trials.len());
    for (i, tr) in trials.iter().enumerate() {
        if tr.predicted.len() != tr.reference.len() || tr.predicted.is_empty() {
            return Err(Error::invalid(format!("trial {i}: predicted and reference series differ in length or are empty")));
        }
        let mut diff = vec![0.0; j];
        for (p, r) in tr.predicted.iter().zip(&tr.reference) {
            if p.len() != j || r.len() != j {
                return Err(Error::DimensionMismatch { what: "joints per frame", expected: j, got: p.len().min(r.len()) });
            }
            for k in 0..j {
                diff[k] += (p[k] - r[k]) / tr.predicted.len() as f64;
            }
        }
        trial_means.push(diff);
    }
    let mut table = BiasTable::default();
    let mut ids: Vec<String> = participants.to_vec();
    for tr in trials {
        if !ids.contains(&tr.participant) {
            ids.push(tr.participant.clone());
        }
    }
    for id in &ids {
        let mine: Vec<&Vec<f64>> = trials.iter().zip(&trial_means).filter(|(t, _)| &t.participant == id).map(|(_, m)| m).collect();
        if mine.is_empty() {
            table.diagnostics.push(format!("participant {id} has no trials; excluded"));
            continue;
        }
        for (k, name) in joint_names.iter().enumerate() {
            let bias = mine.iter().map(|m| m[k]).sum::<f64>() / mine.len() as f64;
            table.rows.push(BiasRow { participant: id.clone(), joint: name.clone(), bias });
        }
    }
    let corrected = trials
        .iter()
        .map(|tr| {
            let b: Vec<f64> = joint_names.iter().map(|n| table.get(&tr.participant, n).unwrap_or(0.0)).collect();
            tr.predicted.iter().map(|row| row.iter().zip(&b).map(|(v, bb)| v - bb).collect()).collect()
        })
        .collect();
    Ok((table, corrected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrataScheme {
    /// Equal-count uncertainty bins for the error-versus-uncertainty curve.
    pub bins: usize,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for StrataScheme {
    fn default() -> Self {
        Self { bins: 5, bootstrap_resamples: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub name: String,
    pub n: usize,
    pub uncertainty_median: f64,
    pub uncertainty_iqr: [f64; 2],
    pub error_median: f64,
    pub error_iqr: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBin {
    pub uncertainty_mean: f64,
    pub mae: f64,
    pub ci95: [f64; 2],
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrataSummary {
    pub schema_version: u32,
    pub strata: Vec<Stratum>,
    pub bins: Vec<UncertaintyBin>,
    pub spearman: f64,
}

impl StrataSummary {
    pub fn stratum(&self, name: &str) -> Option<&Stratum> {
        self.strata.iter().find(|s| s.name == name)
    }
}

fn stratum(name: &str, rows: &[&GaitMetricSample]) -> Stratum {
    let u: Vec<f64> = rows.iter().map(|m| m.uncertainty).collect();
    let e: Vec<f64> = rows.iter().map(|m| m.error).collect();
    Stratum {
        name: name.into(),
        n: rows.len(),
        uncertainty_median: stats::median(&u),
        uncertainty_iqr: stats::iqr(&u),
        error_median: stats::median(&e),
        error_iqr: stats::iqr(&e),
    }
}

/// Error statistics of uncertainty-defined subsets: all, at or below the
/// median uncertainty, bottom and top deciles (inclusive thresholds), plus
/// equal-count bins with bootstrap confidence intervals of the mean error.
pub fn stratify_by_uncertainty(samples: &[GaitMetricSample], scheme: &StrataScheme) -> Result<StrataSummary> {
    if samples.len() < 10 {
        return Err(Error::invalid(format!("stratification needs at least 10 samples, got {}", samples.len())));
    }
    if scheme.bins == 0 || samples.len() < scheme.bins {
        return Err(Error::invalid(format!("{} samples cannot fill {} bins", samples.len(), scheme.bins)));
    }
    let u: Vec<f64> = samples.iter().map(|m| m.uncertainty).collect();
    let (q10, q50, q90) = (stats::quantile(&u, 0.1), stats::quantile(&u, 0.5), stats::quantile(&u, 0.9));
    let pick = |f: &dyn Fn(f64) -> bool| samples.iter().filter(|m| f(m.uncertainty)).collect::<Vec<_>>();
    let all: Vec<&GaitMetricSample> = samples.iter().collect();
    let strata = vec![
        stratum("all", &all),
        stratum("below_p50", &pick(&|x| x <= q50)),
        stratum("bottom_p10", &pick(&|x| x <= q10)),
        stratum("top_p10", &pick(&|x| x >= q90)),
    ];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| u[a].total_cmp(&u[b]));
    let bins = (0..scheme.bins)
        .map(|b| {
            let lo = b * samples.len() / scheme.bins;
            let hi = (b + 1) * samples.len() / scheme.bins;
            let idx = &order[lo..hi];
            let errs: Vec<f64> = idx.iter().map(|&i| samples[i].error).collect();
            let unc: Vec<f64> = idx.iter().map(|&i| samples[i].uncertainty).collect();
            UncertaintyBin {
                uncertainty_mean: stats::mean(&unc),
                mae: stats::mean(&errs),
                ci95: stats::bootstrap_mean_ci(&errs, scheme.bootstrap_resamples, 0.95, stream_seed(scheme.seed, 0xB007, b as u64)),
                n: errs.len(),
            }
        })
        .collect();
    let e: Vec<f64> = samples.iter().map(|m| m.error).collect();
    Ok(StrataSummary { schema_version: SCHEMA_VERSION, strata, bins, spearman: stats::spearman(&u, &e) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StanceThresholds {
    /// Heel height above ground [m].
    pub height: f64,
    /// Heel speed [m/s].
    pub speed: f64,
    /// Minimum stance duration [s].
    pub min_duration: f64,
}

impl Default for StanceThresholds {
    fn default() -> Self {
        Self { height: 0.03, speed: 0.2, min_duration: 0.1 }
    }
}

/// Stance intervals of one heel: maximal runs of frames with heel height
/// and speed below threshold lasting at least the minimum duration.
pub fn detect_stance(
    foot: Foot,
    times: &[f64],
    heel: &[[f64; 3]],
    ground_height: f64,
    thresholds: &StanceThresholds,
) -> Result<Vec<StancePhase>> {
    if times.len() != heel.len() {
        return Err(Error::DimensionMismatch { what: "heel samples vs times", expected: times.len(), got: heel.len() });
    }
    let n = times.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let speed = |i: usize| -> f64 {
        let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
        if a == b {
            return 0.0;
        }
        let d: f64 = (0..3).map(|k| (heel[b][k] - heel[a][k]).powi(2)).sum::<f64>().sqrt();
        d / (times[b] - times[a])
    };
    let on: Vec<bool> = (0..n).map(|i| heel[i][2] - ground_height < thresholds.height && speed(i) < thresholds.speed).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if !on[i] {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < n && on[j + 1] {
            j += 1;
        }
        let (contact, toe_off) = (times[i], times[j]);
        if toe_off - contact >= thresholds.min_duration && toe_off > contact {
            let heel_center = times[i + (j - i) / 2];
            out.push(StancePhase { foot, contact, toe_off, heel_center, source: StanceSource::Detector });
        }
        i = j + 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_and_stride_examples() {
        assert_eq!(step_length(Foot::Left, [0.0, 0.0], Foot::Right, [500.0, 80.0]).unwrap(), 500.0);
        assert_eq!(step_length(Foot::Left, [0.0, 0.0], Foot::Right, [0.0, 120.0]).unwrap(), 0.0);
        assert_eq!(step_length(Foot::Right, [100.0, 10.0], Foot::Left, [720.0, -30.0]).unwrap(), 620.0);
        assert!(matches!(step_length(Foot::Left, [0.0; 2], Foot::Left, [1.0, 0.0]), Err(Error::Contract(_))));
        let l = StrideConvention::Lengthwise;
        assert_eq!(stride_length(Foot::Left, [0.0, 0.0], Foot::Left, [1200.0, 0.0], l).unwrap(), 1200.0);
        assert_eq!(stride_length(Foot::Left, [5.0, 0.0], Foot::Left, [5.0, 0.0], l).unwrap(), 0.0);
        assert!(stride_length(Foot::Left, [0.0; 2], Foot::Right, [1.0, 0.0], l).is_err());
        let e = stride_length(Foot::Left, [0.0, 0.0], Foot::Left, [300.0, 400.0], StrideConvention::Euclidean).unwrap();
        assert!((e - 500.0).abs() < 1e-12);
    }

    #[test]
    fn walkway_alignment() {
        let on_x: Vec<[f64; 3]> = (0..5).map(|i| [i as f64 * 0.6, 0.0, 0.0]).collect();
        let t = align_to_walkway(&on_x).unwrap();
        assert!(t.angle.abs() < 1e-12);
        let a = 30f64.to_radians();
        let tilted: Vec<[f64; 3]> =
            (0..6).map(|i| [2.0 + i as f64 * 0.6 * a.cos(), -1.0 + i as f64 * 0.6 * a.sin(), 0.1 * i as f64]).collect();
        let t = align_to_walkway(&tilted).unwrap();
        assert!((t.angle + a).abs() < 1e-6);
        let p = t.apply(tilted[3]);
        assert!((p[0] - 1.8).abs() < 1e-9 && p[1].abs() < 1e-9);
        assert!(matches!(align_to_walkway(&[[1.0, 1.0, 0.0]; 3]), Err(Error::Alignment(_))));
    }

    #[test]
    fn bias_examples() {
        let names = vec!["hip".to_string(), "knee".to_string()];
        let series = |offset: f64| TrialSeries {
            participant: "p1".into(),
            predicted: (0..10).map(|i| vec![i as f64, -(i as f64)]).collect(),
            reference: (0..10).map(|i| vec![i as f64 + offset, -(i as f64) + offset]).collect(),
        };
        let (table, corrected) = bias_correct(&[series(5.0)], &[], &names).unwrap();
        assert_eq!(table.get("p1", "hip"), Some(-5.0));
        let s = series(5.0);
        for (c, r) in corrected[0].iter().zip(&s.reference) {
            assert!((c[0] - r[0]).abs() < 1e-12);
        }
        let (table, corrected) = bias_correct(&[series(4.0), series(6.0)], &["p2".into()], &names).unwrap();
        assert!((table.get("p1", "knee").unwrap() + 5.0).abs() < 1e-12);
        assert_eq!(table.diagnostics.len(), 1);
        let resid0: f64 = corrected[0].iter().zip(&series(4.0).reference).map(|(c, r)| c[0] - r[0]).sum::<f64>() / 10.0;
        assert!((resid0 - 1.0).abs() < 1e-12);
        let (table, _) = bias_correct(&[series(0.0)], &[], &names).unwrap();
        assert!(table.rows.iter().all(|r| r.bias == 0.0));
    }

    fn sample(u: f64, e: f64) -> GaitMetricSample {
        GaitMetricSample {
            kind: MetricKind::Step,
            foot: Foot::Left,
            time: 0.0,
            samples: vec![],
            median: 0.0,
            ground_truth: e,
            uncertainty: u,
            error: e,
            pit: 0.5,
        }
    }

    #[test]
    fn strata_with_identical_uncertainty_match() {
        let rows: Vec<_> = (0..20).map(|i| sample(3.0, i as f64)).collect();
        let s = stratify_by_uncertainty(&rows, &StrataScheme::default()).unwrap();
        let all = s.stratum("all").unwrap();
        for st in &s.strata {
            assert_eq!(st.error_median, all.error_median);
            assert_eq!(st.n, 20);
        }
        assert!(stratify_by_uncertainty(&rows[..5], &StrataScheme::default()).is_err());
    }

    #[test]
    fn stance_detection_edge_cases() {
        let times: Vec<f64> = (0..20).map(|i| i as f64 * 0.05).collect();
        let still = vec![[0.1, 0.2, 0.0]; 20];
        let s = detect_stance(Foot::Left, &times, &still, 0.0, &StanceThresholds::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].contact, s[0].toe_off), (0.0, times[19]));
        let high = vec![[0.1, 0.2, 0.5]; 20];
        assert!(detect_stance(Foot::Left, &times, &high, 0.0, &StanceThresholds::default()).unwrap().is_empty());
    }
}
