//! Spline-parameterized variational trajectory
//! `t ↦ (μ(t), u(t), d(t))` with `Σ(t) = u uᵀ + diag(d²)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ad::{softplus_f64, Real};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Floor added to the softplus of the raw diagonal coefficients.
pub const DIAG_FLOOR: f64 = 1e-4;

/// Uniform cubic B-spline basis over `[start, end]` split into `intervals`
/// equal pieces. There are `intervals + 3` basis functions; at any time in
/// the span at most four are nonzero and they sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub start: f64,
    pub end: f64,
    pub intervals: usize,
}

impl SplineBasis {
    pub fn new(start: f64, end: f64, intervals: usize) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && end > start) {
            return Err(Error::invalid(format!("basis span [{start}, {end}] is empty")));
        }
        if intervals == 0 {
            return Err(Error::invalid("basis needs at least one interval"));
        }
        Ok(Self { start, end, intervals })
    }

    /// Knot spacing close to `spacing` seconds.
    pub fn with_spacing(start: f64, end: f64, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::invalid("knot spacing must be positive"));
        }
        let n = ((end - start) / spacing).round().max(1.0) as usize;
        Self::new(start, end, n)
    }

    pub fn count(&self) -> usize {
        self.intervals + 3
    }

    /// Interior knots from `start` to `end` inclusive.
    pub fn knots(&self) -> Vec<f64> {
        let h = (self.end - self.start) / self.intervals as f64;
        (0..=self.intervals).map(|i| self.start + h * i as f64).collect()
    }

    fn check(&self, t: f64) -> Result<()> {
        let tol = 1e-9 * (self.end - self.start).max(1.0);
        if t.is_nan() || t < self.start - tol || t > self.end + tol {
            return Err(Error::OutOfSpan { t, start: self.start, end: self.end });
        }
        Ok(())
    }

    /// Index of the first nonzero basis function and the four weights.
    pub fn weights(&self, t: f64) -> Result<(usize, [f64; 4])> {
        self.check(t)?;
        let x = (t - self.start) / (self.end - self.start) * self.intervals as f64;
        let i = (x.floor().max(0.0) as usize).min(self.intervals - 1);
        let u = (x - i as f64).clamp(0.0, 1.0);
        let u2 = u * u;
        let u3 = u2 * u;
        let w = [
            (1.0 - u).powi(3) / 6.0,
            (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
            (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
            u3 / 6.0,
        ];
        Ok((i, w))
    }

    /// Dense weight vector of length [`count`](Self::count).
    pub fn dense_weights(&self, t: f64) -> Result<Vec<f64>> {
        let (i, w) = self.weights(t)?;
        let mut out = vec![0.0; self.count()];
        out[i..i + 4].copy_from_slice(&w);
        Ok(out)
    }
}

/// Gaussian marginal of the trajectory at one time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMoment {
    pub t: f64,
    pub mean: Vec<f64>,
    /// Row-major `D × R`.
    pub factor: Vec<f64>,
    pub diag: Vec<f64>,
}

impl PosteriorMoment {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        if self.mean.is_empty() { 0 } else { self.factor.len() / self.mean.len() }
    }

    /// Marginal standard deviation of every coordinate.
    pub fn sigma(&self) -> Vec<f64> {
        let r = self.rank();
        (0..self.dim())
            .map(|i| {
                let row = &self.factor[i * r..(i + 1) * r];
                (row.iter().map(|v| v * v).sum::<f64>() + self.diag[i] * self.diag[i]).sqrt()
            })
            .collect()
    }

    /// Dense covariance, row-major `D × D`.
    pub fn covariance(&self) -> Vec<f64> {
        let (d, r) = (self.dim(), self.rank());
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s: f64 = (0..r).map(|k| self.factor[i * r + k] * self.factor[j * r + k]).sum();
                if i == j {
                    s += self.diag[i] * self.diag[i];
                }
                cov[i * d + j] = s;
            }
        }
        cov
    }

    /// Entropy in nats.
    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.factor, &self.diag, self.rank())
    }

    /// `draws` reparameterized samples `μ + u ε₁ + d ⊙ ε₂`.
    pub fn sample(&self, draws: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r) = (self.dim(), self.rank());
        (0..draws)
            .map(|_| {
                let e1: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
                let e2: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                reparameterize(&self.mean, &self.factor, &self.diag, &e1, &e2)
            })
            .collect()
    }
}

/// `μ + u ε₁ + d ⊙ ε₂` with one fused node per coordinate.
pub fn reparameterize<T: Real>(mean: &[T], factor: &[T], diag: &[T], e1: &[f64], e2: &[f64]) -> Vec<T> {
    let r = e1.len();
    let mut coeffs = Vec::with_capacity(r + 2);
    let mut xs = Vec::with_capacity(r + 2);
    (0..mean.len())
        .map(|i| {
            coeffs.clear();
            xs.clear();
            coeffs.push(1.0);
            xs.push(mean[i]);
            coeffs.extend_from_slice(e1);
            xs.extend_from_slice(&factor[i * r..(i + 1) * r]);
            coeffs.push(e2[i]);
            xs.push(diag[i]);
            T::affine(0.0, &coeffs, &xs)
        })
        .collect()
}

/// Entropy of `N(·, u uᵀ + diag(d²))` via the matrix determinant lemma:
/// `ln det Σ = Σ ln d² + ln det(I_R + uᵀ diag(d⁻²) u)`.
pub fn gaussian_entropy<T: Real>(factor: &[T], diag: &[T], rank: usize) -> T {
    let d = diag.len();
    let base = 0.5 * d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let logs: Vec<T> = diag.iter().map(|&v| v.ln()).collect();
    let mut half_logdet = T::sum(&logs);
    if rank > 0 {
        let inv2: Vec<T> = diag.iter().map(|&v| {
            let s = v.square();
            s.lift(1.0) / s
        }).collect();
        // Capacitance matrix K = I + uᵀ diag(d⁻²) u, R × R.
        let cols: Vec<Vec<T>> = (0..rank).map(|p| (0..d).map(|i| factor[i * rank + p]).collect()).collect();
        let scaled: Vec<Vec<T>> = cols.iter().map(|c| c.iter().zip(&inv2).map(|(&u, &w)| u * w).collect()).collect();
        let zero = diag[0].lift(0.0);
        let mut cap = vec![zero; rank * rank];
        for p in 0..rank {
            for q in p..rank {
                let s = T::dot(&scaled[p], &cols[q]);
                cap[p * rank + q] = if p == q { s + 1.0 } else { s };
                cap[q * rank + p] = cap[p * rank + q];
            }
        }
        let l = cholesky(&cap, rank).expect("capacitance matrix is positive definite");
        let diag_logs: Vec<T> = (0..rank).map(|i| l[i * rank + i].ln()).collect();
        half_logdet = half_logdet + T::sum(&diag_logs);
    }
    half_logdet + base
}

/// Lower Cholesky factor of a symmetric positive-definite row-major matrix.
pub fn cholesky<T: Real>(a: &[T], n: usize) -> Option<Vec<T>> {
    let zero = a[0].lift(0.0);
    let mut l = vec![zero; n * n];
    for j in 0..n {
        let row: Vec<T> = l[j * n..j * n + j].to_vec();
        let s = a[j * n + j] - if j > 0 { T::dot(&row, &row) } else { zero };
        if !(s.value() > 0.0) {
            return None;
        }
        let ljj = s.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let ri: Vec<T> = l[i * n..i * n + j].to_vec();
            let s = a[i * n + j] - if j > 0 { T::dot(&ri, &row) } else { zero };
            l[i * n + j] = s / ljj;
        }
    }
    Some(l)
}

/// Basis-coefficient parameterization of the posterior trajectory.
///
/// Coefficient layouts, `b` indexing basis functions:
/// `mean[b·D + i]`, `factor[(b·D + i)·R + r]`, `raw_diag[b·D + i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalTrajectory {
    pub basis: SplineBasis,
    pub dim: usize,
    pub rank: usize,
    pub mean: Vec<f64>,
    pub factor: Vec<f64>,
    pub raw_diag: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryDocument {
    schema_version: u32,
    kind: String,
    #[serde(flatten)]
    body: VariationalTrajectory,
}

impl VariationalTrajectory {
    /// Constant mean `mean`, zero factor, and constant diagonal `diag`.
    pub fn constant(basis: SplineBasis, mean: &[f64], rank: usize, diag: f64) -> Result<Self> {
        let dim = mean.len();
        if rank < 1 || rank > dim {
            return Err(Error::invalid(format!("rank {rank} outside [1, {dim}]")));
        }
        if !(diag > DIAG_FLOOR) {
            return Err(Error::invalid(format!("diagonal scale must exceed {DIAG_FLOOR}")));
        }
        let b = basis.count();
        let raw = crate::ad::inverse_softplus(diag - DIAG_FLOOR);
        Ok(Self {
            mean: (0..b).flat_map(|_| mean.iter().copied()).collect(),
            factor: vec![0.0; b * dim * rank],
            raw_diag: vec![raw; b * dim],
            basis,
            dim,
            rank,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.basis.count();
        if self.rank < 1 || self.rank > self.dim {
            return Err(Error::invalid(format!("rank {} outside [1, {}]", self.rank, self.dim)));
        }
        let expect = [
            ("mean coefficients", self.mean.len(), b * self.dim),
            ("factor coefficients", self.factor.len(), b * self.dim * self.rank),
            ("diagonal coefficients", self.raw_diag.len(), b * self.dim),
        ];
        for (what, got, expected) in expect {
            if got != expected {
                return Err(Error::DimensionMismatch { what, expected, got });
            }
        }
        if self.mean.iter().chain(&self.factor).chain(&self.raw_diag).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory coefficients"));
        }
        Ok(())
    }

    /// Number of scalar coefficients.
    pub fn parameter_count(&self) -> usize {
        self.mean.len() + self.factor.len() + self.raw_diag.len()
    }

    pub fn evaluate(&self, t: f64) -> Result<PosteriorMoment> {
        let (first, w) = self.basis.weights(t)?;
        let (d, r) = (self.dim, self.rank);
        let mut mean = vec![0.0; d];
        let mut factor = vec![0.0; d * r];
        let mut raw = vec![0.0; d];
        for (k, &wk) in w.iter().enumerate() {
            let b = first + k;
            for i in 0..d {
                mean[i] += wk * self.mean[b * d + i];
                raw[i] += wk * self.raw_diag[b * d + i];
            }
            for j in 0..d * r {
                factor[j] += wk * self.factor[b * d * r + j];
            }
        }
        let diag = raw.iter().map(|&x| DIAG_FLOOR + softplus_f64(x)).collect();
        Ok(PosteriorMoment { t, mean, factor, diag })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TrajectoryDocument { schema_version: SCHEMA_VERSION, kind: "cubic_bspline".into(), body: self.clone() };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TrajectoryDocument = serde_json::from_str(text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported trajectory schema version {}", doc.schema_version)));
        }
        if doc.kind != "cubic_bspline" {
            return Err(Error::invalid(format!("unsupported basis kind `{}`", doc.kind)));
        }
        let basis = SplineBasis::new(doc.body.basis.start, doc.body.basis.end, doc.body.basis.intervals)?;
        let traj = VariationalTrajectory { basis, ..doc.body };
        traj.validate()?;
        Ok(traj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moment(factor: Vec<f64>, diag: Vec<f64>) -> PosteriorMoment {
        PosteriorMoment { t: 0.0, mean: vec![0.0; diag.len()], factor, diag }
    }

    #[test]
    fn partition_of_unity_and_locality() {
        let b = SplineBasis::new(-1.0, 2.5, 7).unwrap();
        for i in 0..=100 {
            let t = -1.0 + 3.5 * i as f64 / 100.0;
            let w = b.dense_weights(t).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!(w.iter().filter(|&&v| v > 0.0).count() <= 4);
        }
        assert!(matches!(b.weights(2.6), Err(Error::OutOfSpan { .. })));
        assert_eq!(b.knots().len(), 8);
    }

    #[test]
    fn constant_mean_and_diagonal() {
        let basis = SplineBasis::new(0.0, 1.0, 4).unwrap();
        let traj = VariationalTrajectory::constant(basis, &[0.3, -1.0, 2.0], 1, 0.1).unwrap();
        for t in [0.0, 0.37, 1.0] {
            let m = traj.evaluate(t).unwrap();
            for (a, b) in m.mean.iter().zip([0.3, -1.0, 2.0]) {
                assert!((a - b).abs() < 1e-12);
            }
            for s in m.sigma() {
                assert!((s - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_one_outer_product() {
        let m = moment(vec![0.3, 0.4], vec![1e-9, 1e-9]);
        let s = m.sigma();
        assert!((s[0] - 0.3).abs() < 1e-12 && (s[1] - 0.4).abs() < 1e-12);
        let c = m.covariance();
        for (a, b) in c.iter().zip([0.09, 0.12, 0.12, 0.16]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_normal_entropy() {
        let h1 = moment(vec![0.0], vec![1.0]).entropy();
        assert!((h1 - 1.4189385332046727).abs() < 1e-12);
        let h2 = moment(vec![0.0, 0.0], vec![1.0, 1.0]).entropy();
        assert!((h2 - 2.8378770664093453).abs() < 1e-12);
    }

    #[test]
    fn degenerate_samples_equal_mean() {
        let mut m = moment(vec![0.0; 2], vec![0.0, 0.0]);
        m.mean = vec![1.0, -2.0];
        for s in m.sample(5, 3) {
            assert_eq!(s, vec![1.0, -2.0]);
        }
        assert_eq!(m.sample(4, 11), m.sample(4, 11));
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let basis = SplineBasis::new(0.0, 1.3, 5).unwrap();
        let mut traj = VariationalTrajectory::constant(basis, &[0.1, 0.2], 2, 0.05).unwrap();
        traj.factor.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.7).sin() / 3.0);
        traj.mean[3] = std::f64::consts::PI / 7.0;
        let back = VariationalTrajectory::from_json(&traj.to_json().unwrap()).unwrap();
        assert_eq!(back, traj);
    }
}
