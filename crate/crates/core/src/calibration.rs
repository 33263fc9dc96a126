//! Probability integral transforms, expected calibration error, P-P curves
//! and nominal-interval coverage.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf_inv;

use crate::ad::erf_f64;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Nominal levels reported by default.
pub const NOMINAL_LEVELS: [f64; 4] = [0.25, 0.5, 0.75, 0.95];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitKind {
    Spatial,
    Kinematic,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitSet {
    pub kind: PitKind,
    values: Vec<f64>,
}

impl PitSet {
    pub fn new(kind: PitKind, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("PIT set is empty"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("PIT value {v} outside [0, 1]")));
        }
        Ok(Self { kind, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn sorted(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// `mean_i |u_(i) − i/N|` over the ascending PIT values.
pub fn ece_from_pit(pit: &PitSet) -> f64 {
    let n = pit.len() as f64;
    pit.sorted()
        .iter()
        .enumerate()
        .map(|(i, u)| (u - (i + 1) as f64 / n).abs())
        .sum::<f64>()
        / n
}

/// ECE of several PIT sets with every set carrying equal total weight.
pub fn ece_per_trial_weighted(sets: &[PitSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::invalid("no PIT sets to pool"));
    }
    let mut weighted: Vec<(f64, f64)> = sets
        .iter()
        .flat_map(|s| {
            let w = 1.0 / (sets.len() * s.len()) as f64;
            s.values.iter().map(move |&u| (u, w))
        })
        .collect();
    weighted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cum = 0.0;
    let mut ece = 0.0;
    for (u, w) in weighted {
        cum += w;
        ece += w * (u - cum).abs();
    }
    Ok(ece)
}

/// Rank PIT of a ground-truth value against posterior samples: the fraction
/// of samples whose distance to the sample median is at most the ground
/// truth's distance (ties count).
pub fn spatial_pit(samples: &[f64], ground_truth: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!("spatial PIT needs at least 2 samples, got {}", samples.len())));
    }
    let med = crate::stats::median(samples);
    let e = (ground_truth - med).abs();
    let hits = samples.iter().filter(|&&y| (y - med).abs() <= e).count();
    Ok(hits as f64 / samples.len() as f64)
}

fn check_scales(errors: &[f64], scales: &[f64]) -> Result<()> {
    if errors.len() != scales.len() {
        return Err(Error::DimensionMismatch { what: "errors vs scales", expected: errors.len(), got: scales.len() });
    }
    if let Some((t, s)) = scales.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
        return Err(Error::invalid(format!("nonpositive predicted scale {s} at frame {t}")));
    }
    Ok(())
}

/// HalfNormal CDF of `|e|` with scale `σ`: `erf(|e| / (σ√2))`.
pub fn half_normal_cdf(e: f64, sigma: f64) -> f64 {
    erf_f64(e.abs() / (sigma * std::f64::consts::SQRT_2))
}

/// HalfNormal quantile with unit scale: `√2 · erf⁻¹(L)`.
pub fn half_normal_quantile(level: f64) -> f64 {
    std::f64::consts::SQRT_2 * erf_inv(level)
}

pub fn kinematic_pit(errors: &[f64], scales: &[f64]) -> Result<PitSet> {
    check_scales(errors, scales)?;
    let values = errors.iter().zip(scales).map(|(&e, &s)| half_normal_cdf(e, s)).collect();
    PitSet::new(PitKind::Kinematic, values)
}

/// Fraction of `|e_t| ≤ σ_t · z(L)` for each level `L`.
pub fn coverage_at_nominal(errors: &[f64], scales: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    check_scales(errors, scales)?;
    if errors.is_empty() {
        return Err(Error::invalid("no errors to evaluate coverage on"));
    }
    levels
        .iter()
        .map(|&l| {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::invalid(format!("nominal level {l} outside (0, 1)")));
            }
            let z = half_normal_quantile(l);
            let inside = errors.iter().zip(scales).filter(|(e, s)| e.abs() <= **s * z).count();
            Ok(inside as f64 / errors.len() as f64)
        })
        .collect()
}

/// Coverage read off PIT values: `1 − fraction(u > L)`.
pub fn coverage_from_pit(pit: &PitSet, levels: &[f64]) -> Vec<f64> {
    let n = pit.len() as f64;
    levels
        .iter()
        .map(|&l| (pit.len() - pit.values.iter().filter(|&&u| u > l).count()) as f64 / n)
        .collect()
}

/// `(p_i, u_(i))` pairs with `p_i = i/N`.
pub fn calibration_curve(pit: &PitSet) -> Vec<(f64, f64)> {
    let n = pit.len() as f64;
    pit.sorted()
        .into_iter()
        .enumerate()
        .map(|(i, u)| ((i + 1) as f64 / n, u))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageEntry {
    pub level: f64,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub label: String,
    pub kind: PitKind,
    pub n: usize,
    pub ece: f64,
    pub curve: Vec<(f64, f64)>,
    pub coverage: Vec<CoverageEntry>,
}

impl CalibrationReport {
    pub fn from_pit(label: impl Into<String>, pit: &PitSet) -> Self {
        let coverage = NOMINAL_LEVELS
            .iter()
            .zip(coverage_from_pit(pit, &NOMINAL_LEVELS))
            .map(|(&level, coverage)| CoverageEntry { level, coverage })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            label: label.into(),
            kind: pit.kind,
            n: pit.len(),
            ece: ece_from_pit(pit),
            curve: calibration_curve(pit),
            coverage,
        }
    }

    pub fn kinematic(label: impl Into<String>, errors: &[f64], scales: &[f64]) -> Result<Self> {
        let pit = kinematic_pit(errors, scales)?;
        let mut report = Self::from_pit(label, &pit);
        let cov = coverage_at_nominal(errors, scales, &NOMINAL_LEVELS)?;
        for (entry, c) in report.coverage.iter_mut().zip(cov) {
            entry.coverage = c;
        }
        Ok(report)
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("p,u\n");
        for (p, u) in &self.curve {
            out.push_str(&format!("{p},{u}\n"));
        }
        out
    }
}
