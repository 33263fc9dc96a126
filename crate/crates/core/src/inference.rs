//! Variational inference of a trajectory posterior from multi-camera
//! keypoints.
//!
//! The loss is
//!
//! ```text
//! L = NLL − λ_θ · Σ_t H(θ_t) / T + λ_site ‖Δ‖² + λ_excess · excess
//!     + λ_ece(i) · ECE_internal · K
//! ```
//!
//! where the NLL is a Monte Carlo average over reparameterized pose draws,
//! `excess` is the joint-limit violation averaged over frames and draws and
//! `K` is the keypoint count. Gradients come from one reverse sweep over a
//! tape holding every frame; per-frame moment gradients are then chained
//! through the spline weights to the coefficients.

use std::f64::consts::SQRT_2;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ad::{inverse_softplus, softplus_f64, Real, Tape, Var};
use crate::calibration::{ece_from_pit, PitKind, PitSet};
use crate::camera::CameraRig;
use crate::chain::{KinematicChain, SiteOffsets, ROOT_DOF};
use crate::error::{Error, Result};
use crate::initialize;
use crate::observation::ObservationSet;
use crate::trajectory::{gaussian_entropy, reparameterize, PosteriorMoment, SplineBasis, VariationalTrajectory, DIAG_FLOOR};

pub const SCHEMA_VERSION: u32 = 1;

const LN_2PI: f64 = 1.8378770664093453;

/// Minimum number of high-confidence keypoints for the internal ECE.
pub const MIN_INTERNAL_PITS: usize = 10;

/// Score-dependent keypoint noise `σ(s) = softplus(a(1 − s) + b)` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub a: f64,
    pub b: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { a: 2.0, b: inverse_softplus(2.0) }
    }
}

impl NoiseModel {
    pub fn sigma(&self, score: f64) -> f64 {
        softplus_f64(self.a * (1.0 - score) + self.b)
    }

    pub fn sigma_generic<T: Real>(a: T, b: T, score: f64) -> T {
        T::affine(0.0, &[1.0 - score, 1.0], &[a, b]).softplus()
    }

    /// Score whose noise scale is `sigma`, clamped to `[0, 1]`.
    pub fn score_for(&self, sigma: f64) -> f64 {
        if self.a == 0.0 {
            return 1.0;
        }
        (1.0 - (inverse_softplus(sigma) - self.b) / self.a).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_theta: f64,
    pub lambda_site: f64,
    pub lambda_excess: f64,
    pub lambda_ece: f64,
    pub anneal_fraction: f64,
    /// Monte Carlo draws per frame and iteration.
    pub draws: usize,
    pub iterations: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_theta: 1.0,
            lambda_site: 10.0,
            lambda_excess: 100.0,
            lambda_ece: 0.5,
            anneal_fraction: 0.5,
            draws: 8,
            iterations: 3000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_theta, self.lambda_site, self.lambda_excess, self.lambda_ece];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return Err(Error::invalid("anneal fraction must lie in [0, 1]"));
        }
        if self.draws < 1 {
            return Err(Error::invalid("at least one Monte Carlo draw is required"));
        }
        Ok(())
    }
}

/// Calibration weight at iteration `i`: zero through `f · N`, then linear
/// up to `full` at `i = N`.
pub fn anneal_lambda_ece(iteration: usize, total: usize, full: f64, fraction: f64) -> f64 {
    if iteration >= total {
        return full;
    }
    let onset = fraction * total as f64;
    let i = iteration as f64;
    if i <= onset {
        0.0
    } else {
        full * (i - onset) / ((1.0 - fraction) * total as f64)
    }
}

/// Unweighted loss ingredients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub nll: f64,
    /// `Σ_t H(θ_t) / T`.
    pub mean_entropy: f64,
    pub site_norm2: f64,
    pub mean_excess: f64,
    pub internal_ece: Option<f64>,
    pub keypoints: usize,
}

/// Weighted contributions; `total` is their sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub entropy: f64,
    pub site: f64,
    pub excess: f64,
    pub calibration: f64,
    pub total: f64,
    pub lambda_ece: f64,
    pub terms: LossTerms,
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights, iteration: usize) -> Result<LossBreakdown> {
    let checks = [
        ("nll", terms.nll),
        ("entropy", terms.mean_entropy),
        ("site", terms.site_norm2),
        ("excess", terms.mean_excess),
        ("internal_ece", terms.internal_ece.unwrap_or(0.0)),
    ];
    for (name, v) in checks {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    let lambda_ece = anneal_lambda_ece(iteration, weights.iterations, weights.lambda_ece, weights.anneal_fraction);
    let nll = terms.nll;
    let entropy = -weights.lambda_theta * terms.mean_entropy;
    let site = weights.lambda_site * terms.site_norm2;
    let excess = weights.lambda_excess * terms.mean_excess;
    let calibration = match terms.internal_ece {
        Some(e) if lambda_ece > 0.0 => lambda_ece * e * terms.keypoints as f64,
        _ => 0.0,
    };
    let total = nll + entropy + site + excess + calibration;
    Ok(LossBreakdown { nll, entropy, site, excess, calibration, total, lambda_ece, terms: terms.clone() })
}

/// How the summed keypoint NLL enters the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllNormalization {
    /// Summed over frames, cameras and keypoints.
    Sum,
    /// Summed over cameras and keypoints, averaged over frames.
    FrameMean,
}

/// Predicted scale used for the internal ECE PIT of a pixel residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InternalEceScale {
    /// `sqrt(σ_kp(s)² + projected pose variance)`.
    Predictive,
    /// Projected pose standard deviation alone; high-confidence detections
    /// stand in for noise-free ground truth.
    Pose,
}

/// Starting covariance of the variational posterior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceInit {
    /// Per-frame Laplace approximation on whitened reprojection residuals.
    Laplace,
    /// `init_diag² · I` with a small random factor.
    Isotropic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub weights: LossWeights,
    pub rank: usize,
    /// Knot spacing of the spline basis in seconds.
    pub knot_spacing: f64,
    pub step_size: f64,
    pub final_step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Score quantile above which keypoints feed the internal ECE.
    pub top_quantile: f64,
    pub nll_normalization: NllNormalization,
    pub internal_ece_scale: InternalEceScale,
    pub init_covariance: CovarianceInit,
    /// Initial marginal scale of every coordinate.
    pub init_diag: f64,
    /// Standard deviation of the random initial low-rank coefficients.
    pub init_factor: f64,
    pub log_every: usize,
    /// Coordinates probed by the post-fit gradient check (0 disables it).
    pub gradient_check_probes: usize,
    pub divergence_patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            rank: 5,
            knot_spacing: 0.25,
            step_size: 1e-2,
            final_step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            top_quantile: 0.8,
            nll_normalization: NllNormalization::Sum,
            internal_ece_scale: InternalEceScale::Predictive,
            init_covariance: CovarianceInit::Laplace,
            init_diag: 0.02,
            init_factor: 1e-3,
            log_every: 10,
            gradient_check_probes: 8,
            divergence_patience: 10,
        }
    }
}

impl FitConfig {
    /// Settings used for the synthetic gait fixtures: per-frame NLL scaling,
    /// one knot per 10 Hz frame, full-rank covariance for a `dim`-coordinate
    /// pose, offsets held near zero, and small steps from the Laplace start.
    pub fn synthetic(dim: usize) -> Self {
        let mut config = Self {
            rank: dim,
            knot_spacing: 0.1,
            step_size: 1e-3,
            final_step_size: 1e-4,
            nll_normalization: NllNormalization::FrameMean,
            ..Self::default()
        };
        config.weights.lambda_site = 1e4;
        config.weights.iterations = 600;
        config.log_every = 50;
        config
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.rank < 1 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        if !(self.knot_spacing > 0.0) {
            return Err(Error::invalid("knot spacing must be positive"));
        }
        if !(self.step_size > 0.0 && self.final_step_size > 0.0) {
            return Err(Error::invalid("step sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam β parameters must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.top_quantile) {
            return Err(Error::invalid("top quantile must lie in [0, 1]"));
        }
        if !(self.init_diag > DIAG_FLOOR) {
            return Err(Error::invalid(format!("initial scale must exceed {DIAG_FLOOR}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Detection {
    cam: usize,
    kp: usize,
    y: [f64; 2],
    score: f64,
    selected: bool,
}

struct FrameGraph<T> {
    nll: T,
    entropy: T,
    excess: T,
    pits: Vec<T>,
    skipped: usize,
    dropped: usize,
}

/// Counts of likelihood terms lost to nonpositive depth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// (draw, camera, keypoint) terms skipped.
    pub skipped: usize,
    /// (frame, camera, keypoint) terms with every draw skipped.
    pub dropped: usize,
    pub terms: usize,
}

/// Offsets of each parameter block in the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    mean: usize,
    factor: usize,
    raw: usize,
    offsets: usize,
    noise: usize,
    len: usize,
}

/// A fitting problem: data, model and loss configuration.
pub struct Problem<'a> {
    chain: &'a KinematicChain,
    rig: &'a CameraRig,
    config: FitConfig,
    basis: SplineBasis,
    times: Vec<f64>,
    frame_weights: Vec<(usize, [f64; 4])>,
    detections: Vec<Vec<Detection>>,
    selected: usize,
    seed: u64,
    dim: usize,
    rank: usize,
    layout: Layout,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for `(seed, a, b)`.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(seed ^ mix(a ^ mix(b)))
}

impl<'a> Problem<'a> {
    pub fn new(
        chain: &'a KinematicChain,
        rig: &'a CameraRig,
        obs: &ObservationSet,
        config: &FitConfig,
        basis: SplineBasis,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if obs.len() < 2 {
            return Err(Error::InsufficientData(format!("need at least 2 frames, got {}", obs.len())));
        }
        if rig.len() < 2 {
            return Err(Error::InsufficientData("need at least 2 cameras".into()));
        }
        if obs.camera_count() != rig.len() {
            return Err(Error::DimensionMismatch { what: "observation cameras", expected: rig.len(), got: obs.camera_count() });
        }
        if obs.keypoint_count() != chain.site_count() {
            return Err(Error::DimensionMismatch {
                what: "keypoints vs chain sites",
                expected: chain.site_count(),
                got: obs.keypoint_count(),
            });
        }
        let dim = chain.pose_dim();
        let rank = config.rank.min(dim);
        let times = obs.times();
        let frame_weights = times.iter().map(|&t| basis.weights(t)).collect::<Result<Vec<_>>>()?;
        let scores = obs.visible_scores();
        let threshold = if scores.is_empty() { f64::INFINITY } else { crate::stats::quantile(&scores, config.top_quantile) };
        let mut selected = 0;
        let detections: Vec<Vec<Detection>> = obs
            .frames()
            .iter()
            .map(|f| {
                let mut out = Vec::new();
                for (cam, v) in f.views.iter().enumerate() {
                    let Some(v) = v else { continue };
                    for kp in 0..v.kp.len() {
                        if v.vis[kp] {
                            let sel = v.score[kp] >= threshold;
                            selected += sel as usize;
                            out.push(Detection { cam, kp, y: v.kp[kp], score: v.score[kp], selected: sel });
                        }
                    }
                }
                out
            })
            .collect();
        let nb = basis.count();
        let mean = 0;
        let factor = nb * dim;
        let raw = factor + nb * dim * rank;
        let offsets = raw + nb * dim;
        let noise = offsets + 3 * chain.site_count();
        let layout = Layout { mean, factor, raw, offsets, noise, len: noise + 2 };
        Ok(Self {
            chain,
            rig,
            config: FitConfig { rank, ..config.clone() },
            basis,
            times,
            frame_weights,
            detections,
            selected,
            seed,
            dim,
            rank,
            layout,
        })
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.len
    }

    pub fn frame_count(&self) -> usize {
        self.times.len()
    }

    /// Number of detections eligible for the internal ECE (two PIT values each).
    pub fn selected_keypoints(&self) -> usize {
        self.selected
    }

    pub fn pack(&self, traj: &VariationalTrajectory, offsets: &SiteOffsets, noise: &NoiseModel) -> Result<Vec<f64>> {
        if traj.basis != self.basis || traj.dim != self.dim || traj.rank != self.rank {
            return Err(Error::invalid("trajectory does not match the problem's basis, dimension or rank"));
        }
        traj.validate()?;
        offsets.validate(self.chain)?;
        let mut p = Vec::with_capacity(self.layout.len);
        p.extend_from_slice(&traj.mean);
        p.extend_from_slice(&traj.factor);
        p.extend_from_slice(&traj.raw_diag);
        p.extend(offsets.0.iter().flatten());
        p.push(noise.a);
        p.push(noise.b);
        Ok(p)
    }

    pub fn unpack(&self, p: &[f64]) -> (VariationalTrajectory, SiteOffsets, NoiseModel) {
        let l = self.layout;
        let traj = VariationalTrajectory {
            basis: self.basis.clone(),
            dim: self.dim,
            rank: self.rank,
            mean: p[l.mean..l.factor].to_vec(),
            factor: p[l.factor..l.raw].to_vec(),
            raw_diag: p[l.raw..l.offsets].to_vec(),
        };
        let offsets = SiteOffsets(p[l.offsets..l.noise].chunks(3).map(|c| [c[0], c[1], c[2]]).collect());
        (traj, offsets, NoiseModel { a: p[l.noise], b: p[l.noise + 1] })
    }

    /// Blended mean, factor and raw diagonal at frame `f`.
    fn moments(&self, p: &[f64], f: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (first, w) = self.frame_weights[f];
        let (d, r, l) = (self.dim, self.rank, self.layout);
        let mut mean = vec![0.0; d];
        let mut factor = vec![0.0; d * r];
        let mut raw = vec![0.0; d];
        for (k, &wk) in w.iter().enumerate() {
            let b = first + k;
            for i in 0..d {
                mean[i] += wk * p[l.mean + b * d + i];
                raw[i] += wk * p[l.raw + b * d + i];
            }
            for j in 0..d * r {
                factor[j] += wk * p[l.factor + b * d * r + j];
            }
        }
        (mean, factor, raw)
    }

    /// Standard-normal draws `(ε₁ ∈ ℝ^R, ε₂ ∈ ℝ^D)` for one frame and iteration.
    fn draws(&self, iteration: usize, f: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, iteration as u64, f as u64));
        (0..self.config.weights.draws)
            .map(|_| {
                let e1 = (0..self.rank).map(|_| StandardNormal.sample(&mut rng)).collect();
                let e2 = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                (e1, e2)
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn frame_graph<T: Real>(
        &self,
        f: usize,
        mean: &[T],
        factor: &[T],
        raw: &[T],
        offsets: &[[T; 3]],
        a: T,
        b: T,
        draws: &[(Vec<f64>, Vec<f64>)],
    ) -> FrameGraph<T> {
        let zero = a.lift(0.0);
        let diag: Vec<T> = raw.iter().map(|&x| x.softplus() + DIAG_FLOOR).collect();
        let entropy = gaussian_entropy(factor, &diag, self.rank);
        let dets = &self.detections[f];
        let cams = self.rig.cameras();
        let mut proj: Vec<Vec<[T; 2]>> = vec![Vec::with_capacity(draws.len()); dets.len()];
        let mut excess = Vec::with_capacity(draws.len());
        let mut skipped = 0;
        for (e1, e2) in draws {
            let theta = reparameterize(mean, factor, &diag, e1, e2);
            let ex = self.chain.limit_excess(&theta[ROOT_DOF..]);
            if ex.value() > 0.0 {
                excess.push(ex);
            }
            let sites = self.chain.forward_unchecked(&theta, offsets);
            for (j, det) in dets.iter().enumerate() {
                let cam = &cams[det.cam];
                match cam.pixel(&cam.to_camera(&sites[det.kp])) {
                    Some(px) => proj[j].push(px),
                    None => skipped += 1,
                }
            }
        }
        let any_selected = dets.iter().any(|d| d.selected);
        let mean_sites = any_selected.then(|| self.chain.forward_unchecked(mean, offsets));
        let mut nll_terms = Vec::with_capacity(dets.len());
        let mut pits = Vec::new();
        let mut dropped = 0;
        let mut resid = Vec::with_capacity(2 * draws.len());
        for (det, px) in dets.iter().zip(&proj) {
            if px.is_empty() {
                dropped += 1;
                continue;
            }
            let n = px.len() as f64;
            let var = NoiseModel::sigma_generic(a, b, det.score).square();
            resid.clear();
            for p in px {
                resid.push(p[0] - det.y[0]);
                resid.push(p[1] - det.y[1]);
            }
            let ss = T::dot(&resid, &resid);
            nll_terms.push(ss / var * (0.5 / n) + var.ln() + LN_2PI);
            if det.selected && px.len() >= 2 {
                let cam = &cams[det.cam];
                let ms = mean_sites.as_ref().expect("computed when any detection is selected");
                if let Some(center) = cam.pixel(&cam.to_camera(&ms[det.kp])) {
                    for axis in 0..2 {
                        let xs: Vec<T> = px.iter().map(|p| p[axis]).collect();
                        let avg = T::sum(&xs) / n;
                        let dev: Vec<T> = xs.iter().map(|&x| x - avg).collect();
                        let pose_var = T::dot(&dev, &dev) / (n - 1.0);
                        let scale2 = match self.config.internal_ece_scale {
                            InternalEceScale::Predictive => pose_var + var,
                            InternalEceScale::Pose => pose_var + 1e-12,
                        };
                        let r = (center[axis] - det.y[axis]).abs();
                        pits.push((r / (scale2.sqrt() * SQRT_2)).erf());
                    }
                }
            }
        }
        FrameGraph {
            nll: if nll_terms.is_empty() { zero } else { T::sum(&nll_terms) },
            entropy,
            excess: if excess.is_empty() { zero } else { T::sum(&excess) },
            pits,
            skipped,
            dropped,
        }
    }

    fn nll_scale(&self) -> f64 {
        match self.config.nll_normalization {
            NllNormalization::Sum => 1.0,
            NllNormalization::FrameMean => 1.0 / self.frame_count() as f64,
        }
    }

    fn assemble<T: Real>(&self, graphs: &[FrameGraph<T>], p: &[f64]) -> Result<(LossTerms, Diagnostics)> {
        let n = graphs.len() as f64;
        let diag = Diagnostics {
            skipped: graphs.iter().map(|g| g.skipped).sum(),
            dropped: graphs.iter().map(|g| g.dropped).sum(),
            terms: self.detections.iter().map(Vec::len).sum(),
        };
        if diag.dropped == diag.terms {
            return Err(Error::FitFailure { reason: "every likelihood term was behind a camera".into(), trace: vec![] });
        }
        let pits: Vec<f64> = graphs.iter().flat_map(|g| g.pits.iter().map(|u| u.value())).collect();
        let internal_ece = (pits.len() >= 2 * MIN_INTERNAL_PITS)
            .then(|| PitSet::new(PitKind::Internal, pits.iter().map(|u| u.clamp(0.0, 1.0)).collect()).ok())
            .flatten()
            .map(|s| ece_from_pit(&s));
        let l = self.layout;
        let terms = LossTerms {
            nll: self.nll_scale() * graphs.iter().map(|g| g.nll.value()).sum::<f64>(),
            mean_entropy: graphs.iter().map(|g| g.entropy.value()).sum::<f64>() / n,
            site_norm2: p[l.offsets..l.noise].iter().map(|v| v * v).sum(),
            mean_excess: graphs.iter().map(|g| g.excess.value()).sum::<f64>() / (n * self.config.weights.draws as f64),
            internal_ece,
            keypoints: self.chain.site_count(),
        };
        Ok((terms, diag))
    }

    /// Loss at `p` with the Monte Carlo draws of `iteration`.
    pub fn loss(&self, p: &[f64], iteration: usize) -> Result<(LossBreakdown, Diagnostics)> {
        let l = self.layout;
        let offsets: Vec<[f64; 3]> = p[l.offsets..l.noise].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let (a, b) = (p[l.noise], p[l.noise + 1]);
        let graphs: Vec<FrameGraph<f64>> = (0..self.frame_count())
            .map(|f| {
                let (m, u, r) = self.moments(p, f);
                self.frame_graph(f, &m, &u, &r, &offsets, a, b, &self.draws(iteration, f))
            })
            .collect();
        let (terms, diag) = self.assemble(&graphs, p)?;
        Ok((total_loss(&terms, &self.config.weights, iteration)?, diag))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, p: &[f64], iteration: usize, tape: &mut Tape) -> Result<(LossBreakdown, Vec<f64>, Diagnostics)> {
        tape.clear();
        let tape = &*tape;
        let l = self.layout;
        let offsets: Vec<[Var<'_>; 3]> =
            p[l.offsets..l.noise].chunks(3).map(|c| [tape.var(c[0]), tape.var(c[1]), tape.var(c[2])]).collect();
        let (a, b) = (tape.var(p[l.noise]), tape.var(p[l.noise + 1]));
        let mut inputs = Vec::with_capacity(self.frame_count());
        let mut graphs = Vec::with_capacity(self.frame_count());
        for f in 0..self.frame_count() {
            let (m, u, r) = self.moments(p, f);
            let (mv, uv, rv) = (tape.vars(&m), tape.vars(&u), tape.vars(&r));
            graphs.push(self.frame_graph(f, &mv, &uv, &rv, &offsets, a, b, &self.draws(iteration, f)));
            inputs.push((mv, uv, rv));
        }
        let (terms, diag) = self.assemble(&graphs, p)?;
        let breakdown = total_loss(&terms, &self.config.weights, iteration)?;

        let w = &self.config.weights;
        let n = self.frame_count() as f64;
        let mut seeds: Vec<(Var<'_>, f64)> = Vec::with_capacity(3 * graphs.len());
        for g in &graphs {
            seeds.push((g.nll, self.nll_scale()));
            seeds.push((g.entropy, -w.lambda_theta / n));
            seeds.push((g.excess, w.lambda_excess / (n * w.draws as f64)));
        }
        if terms.internal_ece.is_some() && breakdown.lambda_ece > 0.0 {
            let pits: Vec<Var<'_>> = graphs.iter().flat_map(|g| g.pits.iter().copied()).collect();
            let values: Vec<f64> = pits.iter().map(|u| u.value()).collect();
            let scale = breakdown.lambda_ece * terms.keypoints as f64;
            for (u, c) in pits.iter().zip(ece_subgradient(&values)) {
                seeds.push((*u, scale * c));
            }
        }
        seeds.retain(|(v, w)| !v.is_constant() && *w != 0.0);
        let grads = tape.gradient_seeded(&seeds);

        let mut g = vec![0.0; l.len];
        let (d, r) = (self.dim, self.rank);
        for (f, (mv, uv, rv)) in inputs.iter().enumerate() {
            let (first, wts) = self.frame_weights[f];
            let gm = grads.wrt_all(mv);
            let gu = grads.wrt_all(uv);
            let gr = grads.wrt_all(rv);
            for (k, &wk) in wts.iter().enumerate() {
                let bidx = first + k;
                for i in 0..d {
                    g[l.mean + bidx * d + i] += wk * gm[i];
                    g[l.raw + bidx * d + i] += wk * gr[i];
                }
                for j in 0..d * r {
                    g[l.factor + bidx * d * r + j] += wk * gu[j];
                }
            }
        }
        for (k, o) in offsets.iter().enumerate() {
            for i in 0..3 {
                let idx = l.offsets + 3 * k + i;
                g[idx] = grads.wrt(o[i]) + 2.0 * w.lambda_site * p[idx];
            }
        }
        g[l.noise] = grads.wrt(a);
        g[l.noise + 1] = grads.wrt(b);
        Ok((breakdown, g, diag))
    }

    /// Deterministic starting parameters from triangulation and IK, with
    /// the covariance taken from per-frame Laplace approximations when
    /// configured.
    pub fn initial_parameters(&self, obs: &ObservationSet) -> Result<Vec<f64>> {
        let mut poses = initialize::initial_poses(self.chain, self.rig, obs)?;
        let nb = self.basis.count();
        let (d, r) = (self.dim, self.rank);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, u64::MAX, 0));
        let mut factor: Vec<f64> = (0..nb * d * r)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.config.init_factor * z
            })
            .collect();
        let mut raw = vec![inverse_softplus(self.config.init_diag - DIAG_FLOOR); nb * d];
        let mut noise = NoiseModel::default();
        if self.config.init_covariance == CovarianceInit::Laplace {
            let mut covs: Vec<Option<Vec<f64>>> = Vec::with_capacity(poses.len());
            let (mut chi2, mut dof) = (0.0, 0.0);
            let mut scores = Vec::new();
            for (f, pose) in poses.iter_mut().enumerate() {
                let views: Vec<initialize::WeightedView> =
                    self.detections[f].iter().map(|det| (det.cam, det.kp, det.y, noise.sigma(det.score))).collect();
                if views.len() * 2 < d {
                    covs.push(None);
                    continue;
                }
                let (x, cov, c2, kept) = initialize::laplace_frame(self.chain, self.rig, &views, pose, 20);
                *pose = x;
                covs.push(Some(cov));
                chi2 += c2;
                dof += (2 * kept) as f64 - d as f64;
                scores.extend(self.detections[f].iter().map(|det| det.score));
            }
            if dof > 0.0 && !scores.is_empty() {
                // Rescale the noise model and covariances by the reduced χ².
                let kappa2 = chi2 / dof;
                let s_med = crate::stats::median(&scores);
                let sigma = kappa2.sqrt() * noise.sigma(s_med);
                noise.b = inverse_softplus(sigma) - noise.a * (1.0 - s_med);
                for cov in covs.iter_mut().flatten() {
                    cov.iter_mut().for_each(|v| *v *= kappa2);
                }
            }
            let fallback: Vec<f64> =
                (0..d * d).map(|k| if k % (d + 1) == 0 { self.config.init_diag.powi(2) } else { 0.0 }).collect();
            let mut u_frames: Vec<Vec<f64>> = Vec::with_capacity(covs.len());
            let mut raw_frames: Vec<Vec<f64>> = Vec::with_capacity(covs.len());
            for cov in &covs {
                let (mut u, diag) = initialize::low_rank_split(cov.as_ref().unwrap_or(&fallback), d, r, 2.0 * DIAG_FLOOR);
                if let Some(prev) = u_frames.last() {
                    u = initialize::procrustes_align(&u, prev, d, r);
                }
                u_frames.push(u);
                raw_frames.push(diag.iter().map(|v| inverse_softplus(v - DIAG_FLOOR)).collect());
            }
            factor = initialize::fit_spline_coefficients(&self.basis, &self.times, &u_frames, 1e-4)?;
            raw = initialize::fit_spline_coefficients(&self.basis, &self.times, &raw_frames, 1e-4)?;
        }
        let mean = initialize::fit_spline_coefficients(&self.basis, &self.times, &poses, 1e-4)?;
        let traj = VariationalTrajectory { basis: self.basis.clone(), dim: d, rank: r, mean, factor, raw_diag: raw };
        self.pack(&traj, &SiteOffsets::zeros(self.chain), &noise)
    }
}

/// Coefficients `c_j` with `ECE = Σ_j c_j u_j + const` at the current ranks.
fn ece_subgradient(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut c = vec![0.0; values.len()];
    for (rank, &j) in order.iter().enumerate() {
        let diff = values[j] - (rank + 1) as f64 / n;
        c[j] = if diff > 0.0 { 1.0 / n } else if diff < 0.0 { -1.0 / n } else { 0.0 };
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub probes: usize,
}

/// Central-difference check of `f`'s gradient at the coordinates `indices`.
/// `f` must be deterministic (fixed Monte Carlo draws). The discrepancy of
/// coordinate `i` is `|g_i − fd_i| / max(|g_i|, |fd_i|, floor)` with
/// `floor = 1e-6 · max(1, |f(x)|)`. Steps `h = 1e-5 · max(1, |x_i|)`, `h/10`
/// and `h/100` are tried and the smallest discrepancy kept, so a rank kink
/// of the ECE term lying within `h` of `x` does not count as a mismatch.
pub fn gradient_check_at<F>(mut f: F, params: &[f64], indices: &[usize]) -> Result<GradientCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (value, grad) = f(params)?;
    let floor = 1e-6 * value.abs().max(1.0);
    let mut worst = (0.0, 0);
    let mut x = params.to_vec();
    for &i in indices {
        let mut rel = f64::INFINITY;
        for shrink in [1.0, 0.1, 0.01] {
            let h = shrink * 1e-5 * params[i].abs().max(1.0);
            x[i] = params[i] + h;
            let (fp, _) = f(&x)?;
            x[i] = params[i] - h;
            let (fm, _) = f(&x)?;
            x[i] = params[i];
            let fd = (fp - fm) / (2.0 * h);
            let r = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(floor);
            if r.is_nan() {
                rel = f64::NAN;
                break;
            }
            rel = rel.min(r);
            if rel < 1e-6 {
                break;
            }
        }
        if rel > worst.0 || !rel.is_finite() {
            worst = (rel, i);
        }
    }
    Ok(GradientCheck { max_relative_error: worst.0, worst_index: worst.1, probes: indices.len() })
}

/// [`gradient_check_at`] over every coordinate, or over a seeded random
/// subset of 200 when there are more.
pub fn gradient_check<F>(f: F, params: &[f64], seed: u64) -> Result<GradientCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let indices = probe_indices(params.len(), 200, seed);
    gradient_check_at(f, params, &indices)
}

fn probe_indices(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub total: f64,
    pub nll: f64,
    pub entropy: f64,
    pub site: f64,
    pub excess: f64,
    pub calibration: f64,
    pub lambda_ece: f64,
    pub internal_ece: Option<f64>,
}

impl TraceRow {
    fn new(iteration: usize, b: &LossBreakdown) -> Self {
        Self {
            iteration,
            total: b.total,
            nll: b.nll,
            entropy: b.entropy,
            site: b.site,
            excess: b.excess,
            calibration: b.calibration,
            lambda_ece: b.lambda_ece,
            internal_ece: b.terms.internal_ece,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub seed: u64,
    pub iterations: usize,
    pub final_loss: f64,
    pub breakdown: LossBreakdown,
    pub trace: Vec<TraceRow>,
    pub gradient_check: Option<GradientCheck>,
    pub diagnostics: Diagnostics,
    pub warnings: Vec<String>,
    /// Wall-clock seconds; the only field that varies between identical runs.
    pub wall_time_s: f64,
}

impl FitReport {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,total,nll,entropy,site,excess,calibration,lambda_ece,internal_ece\n");
        for r in &self.trace {
            let ece = r.internal_ece.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.iteration, r.total, r.nll, r.entropy, r.site, r.excess, r.calibration, r.lambda_ece, ece
            ));
        }
        out
    }

    /// Internal ECE values of the trace, `(iteration, ece)`.
    pub fn internal_ece_trace(&self) -> Vec<(usize, f64)> {
        self.trace.iter().filter_map(|r| r.internal_ece.map(|e| (r.iteration, e))).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub trajectory: VariationalTrajectory,
    pub offsets: SiteOffsets,
    pub noise: NoiseModel,
    pub report: FitReport,
}

impl FitResult {
    pub fn moment(&self, t: f64) -> Result<PosteriorMoment> {
        self.trajectory.evaluate(t)
    }
}

fn cosine_step(i: usize, n: usize, start: f64, end: f64) -> f64 {
    let x = if n <= 1 { 1.0 } else { i as f64 / (n - 1) as f64 };
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Fits the variational trajectory, site offsets and noise model.
pub fn fit(obs: &ObservationSet, chain: &KinematicChain, rig: &CameraRig, config: &FitConfig, seed: u64) -> Result<FitResult> {
    let start = Instant::now();
    let (t0, t1) = obs.span();
    let basis = SplineBasis::with_spacing(t0, t1, config.knot_spacing)?;
    let problem = Problem::new(chain, rig, obs, config, basis, seed)?;
    let mut warnings = Vec::new();
    if config.weights.lambda_ece > 0.0 && problem.selected_keypoints() < MIN_INTERNAL_PITS {
        warnings.push(format!(
            "only {} high-confidence keypoints; internal ECE term dropped",
            problem.selected_keypoints()
        ));
    }
    let mut p = problem.initial_parameters(obs)?;
    let n_iter = config.weights.iterations;
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    let mut tape = Tape::new();
    let mut trace = Vec::new();
    let mut totals = Vec::with_capacity(n_iter);
    let mut bad_run = 0;
    let log_every = config.log_every.max(1);
    for i in 0..n_iter {
        let step = problem.loss_and_gradient(&p, i, &mut tape);
        match step {
            Ok((b, g, _)) if b.total.is_finite() && g.iter().all(|x| x.is_finite()) => {
                bad_run = 0;
                totals.push(b.total);
                if i % log_every == 0 {
                    trace.push(TraceRow::new(i, &b));
                }
                let lr = cosine_step(i, n_iter, config.step_size, config.final_step_size);
                let bc1 = 1.0 - config.beta1.powi(i as i32 + 1);
                let bc2 = 1.0 - config.beta2.powi(i as i32 + 1);
                for k in 0..p.len() {
                    m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
                    v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
                    p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + config.epsilon);
                }
            }
            Ok(_) | Err(Error::NonFinite(_)) => {
                totals.push(f64::NAN);
                bad_run += 1;
                if bad_run >= config.divergence_patience.max(1) {
                    return Err(Error::FitFailure {
                        reason: format!("loss non-finite for {bad_run} consecutive iterations at iteration {i}"),
                        trace: totals,
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    let (breakdown, diagnostics) = problem.loss(&p, n_iter)?;
    trace.push(TraceRow::new(n_iter, &breakdown));
    if diagnostics.skipped > 0 {
        warnings.push(format!("{} draw-level likelihood terms fell behind a camera", diagnostics.skipped));
    }
    let gradient_check = if config.gradient_check_probes > 0 {
        let idx = probe_indices(p.len(), config.gradient_check_probes, stream_seed(seed, 1, 1));
        let mut tape = Tape::new();
        Some(gradient_check_at(
            |q| problem.loss_and_gradient(q, n_iter, &mut tape).map(|(b, g, _)| (b.total, g)),
            &p,
            &idx,
        )?)
    } else {
        None
    };
    let (trajectory, offsets, noise) = problem.unpack(&p);
    let report = FitReport {
        schema_version: SCHEMA_VERSION,
        seed,
        iterations: n_iter,
        final_loss: breakdown.total,
        breakdown,
        trace,
        gradient_check,
        diagnostics,
        warnings,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(FitResult { trajectory, offsets, noise, report })
}

fn evaluation_problem<'a>(
    traj: &VariationalTrajectory,
    chain: &'a KinematicChain,
    rig: &'a CameraRig,
    obs: &ObservationSet,
    config: FitConfig,
    seed: u64,
) -> Result<Problem<'a>> {
    let config = FitConfig { rank: traj.rank, ..config };
    Problem::new(chain, rig, obs, &config, traj.basis.clone(), seed)
}

/// Monte Carlo keypoint negative log-likelihood summed over frames, cameras
/// and visible keypoints, averaged over `draws` pose samples per frame.
#[allow(clippy::too_many_arguments)]
pub fn keypoint_nll(
    traj: &VariationalTrajectory,
    chain: &KinematicChain,
    offsets: &SiteOffsets,
    rig: &CameraRig,
    obs: &ObservationSet,
    noise: &NoiseModel,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut config = FitConfig::default();
    config.weights.draws = draws;
    config.nll_normalization = NllNormalization::Sum;
    let problem = evaluation_problem(traj, chain, rig, obs, config, seed)?;
    let p = problem.pack(traj, offsets, noise)?;
    Ok(problem.loss(&p, 0)?.0.terms.nll)
}

/// ECE of HalfNormal PITs of posterior-mean reprojection residuals of the
/// keypoints scoring at or above the `top_quantile` score quantile.
#[allow(clippy::too_many_arguments)]
pub fn internal_ece(
    traj: &VariationalTrajectory,
    chain: &KinematicChain,
    offsets: &SiteOffsets,
    rig: &CameraRig,
    obs: &ObservationSet,
    noise: &NoiseModel,
    top_quantile: f64,
    scale: InternalEceScale,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut config = FitConfig::default();
    config.weights.draws = draws.max(2);
    config.top_quantile = top_quantile;
    config.internal_ece_scale = scale;
    let problem = evaluation_problem(traj, chain, rig, obs, config, seed)?;
    if problem.selected_keypoints() < MIN_INTERNAL_PITS {
        return Err(Error::InsufficientData(format!(
            "{} high-confidence keypoints, need {MIN_INTERNAL_PITS}",
            problem.selected_keypoints()
        )));
    }
    let p = problem.pack(traj, offsets, noise)?;
    problem
        .loss(&p, 0)?
        .0
        .terms
        .internal_ece
        .ok_or_else(|| Error::InsufficientData("too few internal PIT values".into()))
}
