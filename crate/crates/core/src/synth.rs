//! Synthetic gait scenarios with known ground truth.
//!
//! A lower-body walker follows periodic joint patterns. Each leg supports
//! the body for the first half of its cycle with the heel planted on the
//! ground; the root translation is integrated from the planted heel so that
//! progression emerges from the leg motion. Hip amplitudes are solved so the
//! steady-state step length hits the requested target and the right/left
//! step ratio equals the requested asymmetry.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::inverse_softplus;
use crate::camera::{Camera, CameraRig, Intrinsics};
use crate::chain::{forward_kinematics_pose, KinematicChain, SiteOffsets, ROOT_DOF};
use crate::error::{Error, Result};
use crate::gait::{median_frame_time, Foot, HeelEvent, StancePhase, StanceSource, WalkwayTransform};
use crate::inference::{stream_seed, NoiseModel};
use crate::observation::{Frame, ObservationSet, View};

pub const SCHEMA_VERSION: u32 = 1;

/// Fourier coefficients `[c0, a1, b1, a2, b2, …]` of the knee flexion
/// pattern over one leg cycle starting at heel strike.
const KNEE: [f64; 7] = [0.361, -0.002, -0.337, -0.252, 0.097, -0.013, 0.086];
const ANKLE: [f64; 5] = [0.016, 0.012, 0.111, -0.097, -0.132];
/// Hip flexion shape before scaling: peak flexion near heel strike.
const HIP: [f64; 3] = [0.05, 0.30, 0.06];

fn fourier(c: &[f64], psi: f64) -> f64 {
    let mut v = c[0];
    for (k, pair) in c[1..].chunks(2).enumerate() {
        let w = (k + 1) as f64 * psi;
        v += pair[0] * w.cos() + pair.get(1).copied().unwrap_or(0.0) * w.sin();
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaitParams {
    /// Steps per minute.
    pub cadence: f64,
    /// Mean step length target [mm].
    pub step_length_mm: f64,
    /// Right step length over left step length.
    pub asymmetry: f64,
    /// Progression speed [m/s]; derived from cadence and step length when
    /// absent and checked against them when present.
    pub speed: Option<f64>,
    /// Multiplier on every periodic pattern; 0 gives a rigid glide.
    pub amplitude: f64,
}

impl Default for GaitParams {
    fn default() -> Self {
        Self { cadence: 110.0, step_length_mm: 650.0, asymmetry: 1.0, speed: None, amplitude: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub start: f64,
    pub end: f64,
    pub cameras: Vec<usize>,
    /// Affected keypoints; all when absent.
    #[serde(default)]
    pub keypoints: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Baseline keypoint noise [px].
    pub sigma_px: f64,
    /// Standard deviation of the log-normal per-detection scale factor.
    pub spread: f64,
    /// Slope `a` of the score coupling `σ = softplus(a(1 − s) + b)`.
    pub coupling_slope: f64,
    /// Score assigned to a detection whose noise scale is `reference_sigma_px`.
    pub reference_score: f64,
    pub reference_sigma_px: f64,
    pub score_jitter: f64,
    pub outlier_rate: f64,
    /// Random per-keypoint dropout probability.
    pub dropout_rate: f64,
    /// Piecewise-linear `(time, multiplier)` knots on the noise scale.
    pub schedule: Vec<(f64, f64)>,
    pub occlusions: Vec<Occlusion>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_px: 2.0,
            spread: 0.3,
            coupling_slope: 3.0,
            reference_score: 0.7,
            reference_sigma_px: 2.0,
            score_jitter: 0.02,
            outlier_rate: 0.02,
            dropout_rate: 0.0,
            schedule: Vec::new(),
            occlusions: Vec::new(),
        }
    }
}

impl NoiseSpec {
    /// Score coupling used to map noise scales to confidence scores.
    pub fn coupling(&self) -> NoiseModel {
        let a = self.coupling_slope;
        NoiseModel { a, b: inverse_softplus(self.reference_sigma_px) - a * (1.0 - self.reference_score) }
    }

    pub fn multiplier(&self, t: f64) -> f64 {
        let s = &self.schedule;
        match s.len() {
            0 => 1.0,
            _ if t <= s[0].0 => s[0].1,
            _ if t >= s[s.len() - 1].0 => s[s.len() - 1].1,
            _ => {
                let i = s.iter().position(|k| k.0 > t).unwrap_or(s.len() - 1);
                let (a, b) = (s[i - 1], s[i]);
                a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
            }
        }
    }
}

/// Cameras alternating on both sides of the walkway, spread along it and
/// aimed at the walkway centre line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub count: usize,
    /// Lateral distance from the walkway centre line [m].
    pub side_distance: f64,
    pub height: f64,
    /// Fraction of the walked distance spanned by the camera positions.
    pub spread: f64,
    pub intrinsics: Intrinsics,
    /// Explicit rig overriding the layout above.
    pub explicit: Option<CameraRig>,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            count: 4,
            side_distance: 4.0,
            height: 2.0,
            spread: 0.6,
            intrinsics: Intrinsics { fx: 1400.0, fy: 1400.0, cx: 960.0, cy: 540.0, image_size: [1920.0, 1080.0] },
            explicit: None,
        }
    }
}

impl RigSpec {
    pub fn build(&self, walk_length: f64) -> Result<CameraRig> {
        if let Some(rig) = &self.explicit {
            return Ok(rig.clone());
        }
        if !(2..=12).contains(&self.count) {
            return Err(Error::Scenario(format!("camera count {} outside 2..=12", self.count)));
        }
        let half = 0.5 * self.spread * walk_length;
        let cams = (0..self.count)
            .map(|i| {
                let x = -half + 2.0 * half * i as f64 / (self.count - 1) as f64;
                let side = if i % 2 == 0 { 1.0 } else { -1.0 };
                Camera::look_at(
                    self.intrinsics.clone(),
                    [x, side * self.side_distance, self.height],
                    [0.5 * x, 0.0, 0.9],
                    [0.0, 0.0, 1.0],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(cams)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaitScenario {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    pub frame_rate: f64,
    pub gait: GaitParams,
    pub rig: RigSpec,
    pub noise: NoiseSpec,
    /// Anterior shift of the reference heel landmark [mm].
    pub heel_offset_mm: f64,
}

impl Default for GaitScenario {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 0,
            duration: 12.0,
            frame_rate: 10.0,
            gait: GaitParams::default(),
            rig: RigSpec::default(),
            noise: NoiseSpec::default(),
            heel_offset_mm: 0.0,
        }
    }
}

impl GaitScenario {
    pub fn validate(&self) -> Result<()> {
        let g = &self.gait;
        let n = &self.noise;
        let checks: [(bool, &str); 12] = [
            (self.duration > 0.0 && self.duration.is_finite(), "duration must be positive"),
            (self.frame_rate > 0.0 && self.frame_rate.is_finite(), "frame rate must be positive"),
            (g.cadence > 0.0 && g.cadence.is_finite(), "cadence must be positive"),
            (g.step_length_mm > 0.0, "step length must be positive"),
            (g.asymmetry > 0.0, "asymmetry factor must be positive"),
            (g.amplitude >= 0.0, "amplitude must be nonnegative"),
            (n.sigma_px > 0.0 && n.sigma_px.is_finite(), "noise sigma must be positive"),
            (n.spread >= 0.0 && n.score_jitter >= 0.0, "noise spread and jitter must be nonnegative"),
            ((0.0..=1.0).contains(&n.outlier_rate), "outlier rate outside [0, 1]"),
            ((0.0..1.0).contains(&n.dropout_rate), "dropout rate outside [0, 1)"),
            (n.schedule.iter().all(|k| k.1 > 0.0) && n.schedule.windows(2).all(|w| w[0].0 < w[1].0), "noise schedule needs increasing times and positive multipliers"),
            (n.coupling_slope > 0.0 && (0.0..=1.0).contains(&n.reference_score) && n.reference_sigma_px > 0.0, "invalid score coupling"),
        ];
        if let Some((_, msg)) = checks.iter().find(|c| !c.0) {
            return Err(Error::Scenario((*msg).into()));
        }
        if let Some(v) = g.speed {
            let derived = self.derived_speed();
            if (v - derived).abs() > 0.05 * derived {
                return Err(Error::Scenario(format!(
                    "speed {v} m/s inconsistent with cadence and step length ({derived:.3} m/s)"
                )));
            }
        }
        Ok(())
    }

    /// `cadence/60 · step length`, m/s.
    pub fn derived_speed(&self) -> f64 {
        self.gait.cadence / 60.0 * self.gait.step_length_mm / 1000.0
    }

    pub fn frame_times(&self) -> Vec<f64> {
        let n = (self.duration * self.frame_rate).round() as usize;
        (0..n).map(|k| k as f64 / self.frame_rate).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Fixture::all()
            .into_iter()
            .find(|f| f.name() == name)
            .map(|f| f.scenario(0))
            .ok_or_else(|| Error::Scenario(format!("unknown fixture {name}")))
    }
}

/// Named reference scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fixture {
    Clean,
    Noisy,
    Occluded,
    Asymmetric,
    OutlierHeavy,
}

impl Fixture {
    pub fn all() -> [Fixture; 5] {
        [Fixture::Clean, Fixture::Noisy, Fixture::Occluded, Fixture::Asymmetric, Fixture::OutlierHeavy]
    }

    pub fn name(self) -> &'static str {
        match self {
            Fixture::Clean => "clean",
            Fixture::Noisy => "noisy",
            Fixture::Occluded => "occluded",
            Fixture::Asymmetric => "asymmetric",
            Fixture::OutlierHeavy => "outlier_heavy",
        }
    }

    pub fn scenario(self, seed: u64) -> GaitScenario {
        let mut s = GaitScenario { name: self.name().into(), seed, ..GaitScenario::default() };
        s.noise.outlier_rate = 0.0;
        match self {
            Fixture::Clean => {
                s.noise.sigma_px = 0.2;
                s.noise.spread = 0.0;
            }
            Fixture::Noisy => {}
            Fixture::Occluded => {
                s.noise.occlusions = vec![Occlusion { start: 4.0, end: 7.0, cameras: vec![0, 1], keypoints: None }];
            }
            Fixture::Asymmetric => s.gait.asymmetry = 1.2,
            Fixture::OutlierHeavy => s.noise.outlier_rate = 0.08,
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBundle {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub times: Vec<f64>,
    /// Full pose per frame, `[root (6), joints]`.
    pub poses: Vec<Vec<f64>>,
    /// World site positions per frame [m].
    pub sites: Vec<Vec<[f64; 3]>>,
    pub stance: Vec<StancePhase>,
    pub events: Vec<HeelEvent>,
    pub walkway: WalkwayTransform,
    /// Site indices of the left and right heel.
    pub heel_sites: [usize; 2],
    pub speed: f64,
    /// Noise scale actually used per frame, camera and keypoint [px]; 0 for
    /// detections that were not rendered.
    pub noise_scales: Vec<Vec<Vec<f64>>>,
    /// `(frame, camera, keypoint)` of injected outliers.
    pub outliers: Vec<(usize, usize, usize)>,
    pub warnings: Vec<String>,
}

impl GroundTruthBundle {
    /// Step lengths between consecutive heel events [mm], tagged with the
    /// landing foot.
    pub fn step_lengths(&self) -> Vec<(Foot, f64)> {
        self.events
            .windows(2)
            .filter(|w| w[0].stance.foot != w[1].stance.foot)
            .map(|w| (w[1].stance.foot, (w[1].reference[0] - w[0].reference[0]).abs() * 1000.0))
            .collect()
    }
}

struct Pattern {
    hip_scale: f64,
    hip_offset: [f64; 2],
    amplitude: f64,
    stride_freq: f64,
}

impl Pattern {
    /// Each leg is in stance for the first half of its cycle.
    fn stance_foot(&self, t: f64) -> Foot {
        if (self.stride_freq * t).fract() < 0.5 {
            Foot::Left
        } else {
            Foot::Right
        }
    }

    fn pose(&self, t: f64) -> Vec<f64> {
        let a = self.amplitude;
        let phi = TAU * self.stride_freq * t;
        let mut pose = vec![0.0; ROOT_DOF + 10];
        pose[3] = a * 0.03 * phi.sin();
        pose[4] = a * (0.04 + 0.02 * (2.0 * phi).cos());
        pose[5] = a * 0.05 * phi.cos();
        pose[6] = a * 0.04 * (2.0 * phi).cos();
        pose[7] = a * 0.03 * phi.sin();
        for (side, shift) in [(0usize, 0.0), (1, PI)] {
            let psi = phi + shift;
            let base = ROOT_DOF + 2 + 4 * side;
            pose[base] = self.hip_offset[side] + a * self.hip_scale * fourier(&HIP, psi);
            pose[base + 1] = a * 0.05 * (psi - 0.5).cos();
            pose[base + 2] = 0.07 + a * (fourier(&KNEE, psi) - 0.07);
            pose[base + 3] = a * fourier(&ANKLE, psi);
        }
        pose
    }
}

struct Walk {
    poses: Vec<Vec<f64>>,
    stance_foot: Vec<Option<Foot>>,
    planted: Vec<[f64; 3]>,
}

/// Integrates the root so the lowest heel stays fixed.
fn integrate(chain: &KinematicChain, pattern: &Pattern, times: &[f64], heels: [usize; 2]) -> Result<Walk> {
    let zero = SiteOffsets::zeros(chain);
    let mut walk = Walk { poses: Vec::new(), stance_foot: Vec::new(), planted: Vec::new() };
    let mut current: Option<(Foot, [f64; 3])> = None;
    let mut root = [0.0f64; 2];
    for &t in times {
        let mut pose = pattern.pose(t);
        let sites = forward_kinematics_pose(chain, &pose, &zero)?;
        let (l, r) = (sites[heels[0]], sites[heels[1]]);
        if pattern.amplitude == 0.0 {
            // No periodic motion: rigid glide handled by the caller.
            pose[2] = -l[2].min(r[2]);
            walk.poses.push(pose);
            walk.stance_foot.push(None);
            walk.planted.push([0.0; 3]);
            continue;
        }
        let foot = pattern.stance_foot(t);
        let rel = if foot == Foot::Left { l } else { r };
        match current {
            Some((f, p)) if f == foot => root = [p[0] - rel[0], p[1] - rel[1]],
            _ => current = Some((foot, [root[0] + rel[0], root[1] + rel[1], 0.0])),
        }
        pose[0] = root[0];
        pose[1] = root[1];
        pose[2] = -rel[2];
        walk.poses.push(pose);
        walk.stance_foot.push(Some(foot));
        walk.planted.push(current.expect("set above").1);
    }
    Ok(walk)
}

/// Maximal runs of one stance foot that do not touch either end of the grid.
fn stance_runs(walk: &Walk) -> Vec<(Foot, usize, usize)> {
    let mut runs = Vec::new();
    let n = walk.stance_foot.len();
    let mut i = 0;
    while i < n {
        let Some(f) = walk.stance_foot[i] else {
            i += 1;
            continue;
        };
        let mut j = i;
        while j + 1 < n && walk.stance_foot[j + 1] == Some(f) {
            j += 1;
        }
        if i > 0 && j + 1 < n {
            runs.push((f, i, j));
        }
        i = j + 1;
    }
    runs
}

/// Mean left and right step lengths [m] over complete stance runs.
fn step_means(walk: &Walk) -> Option<[f64; 2]> {
    let runs = stance_runs(walk);
    let mut acc = [(0.0, 0usize); 2];
    for w in runs.windows(2) {
        let (a, b) = (walk.planted[w[0].1], walk.planted[w[1].1]);
        let slot = matches!(w[1].0, Foot::Right) as usize;
        acc[slot].0 += b[0] - a[0];
        acc[slot].1 += 1;
    }
    (acc[0].1 > 0 && acc[1].1 > 0).then(|| [acc[0].0 / acc[0].1 as f64, acc[1].0 / acc[1].1 as f64])
}

fn bisect(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (flo, fhi) = (f(lo)?, f(hi)?);
    if flo.signum() == fhi.signum() {
        return Err(Error::Scenario("step-length target cannot be reached within joint limits".into()));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if f(mid)?.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn solve_pattern(chain: &KinematicChain, scenario: &GaitScenario, heels: [usize; 2]) -> Result<Pattern> {
    let g = &scenario.gait;
    let stride_freq = g.cadence / 120.0;
    let mut pattern = Pattern { hip_scale: 1.0, hip_offset: [0.0; 2], amplitude: g.amplitude, stride_freq };
    if g.amplitude == 0.0 {
        return Ok(pattern);
    }
    let period = 1.0 / stride_freq;
    let grid: Vec<f64> = (0..=(3.2 * period / 0.002) as usize).map(|k| k as f64 * 0.002).collect();
    let target = g.step_length_mm / 1000.0;
    let measure = |p: &Pattern| -> Result<[f64; 2]> {
        step_means(&integrate(chain, p, &grid, heels)?)
            .ok_or_else(|| Error::Scenario("walker produced no alternating stance".into()))
    };
    for _ in 0..4 {
        let offsets = pattern.hip_offset;
        pattern.hip_scale = bisect(0.05, 3.0, |s| {
            let p = Pattern { hip_scale: s, hip_offset: offsets, ..pattern };
            let m = measure(&p)?;
            Ok(0.5 * (m[0] + m[1]) - target)
        })?;
        if g.asymmetry == 1.0 {
            break;
        }
        let scale = pattern.hip_scale;
        let d = bisect(-0.3, 0.3, |d| {
            let p = Pattern { hip_scale: scale, hip_offset: [-d, d], ..pattern };
            let m = measure(&p)?;
            Ok(m[1] / m[0] - g.asymmetry)
        })?;
        pattern.hip_offset = [-d, d];
    }
    Ok(pattern)
}

/// Ground-truth trajectory and heel events for a lower-body scenario.
pub fn generate_trajectory(scenario: &GaitScenario) -> Result<(GroundTruthBundle, KinematicChain)> {
    scenario.validate()?;
    let chain = KinematicChain::lower_body();
    let heels = [
        chain.site_index("heel_l").expect("preset site"),
        chain.site_index("heel_r").expect("preset site"),
    ];
    let toes = [chain.site_index("toe_l").expect("preset site"), chain.site_index("toe_r").expect("preset site")];
    let times = scenario.frame_times();
    if times.len() < 4 {
        return Err(Error::Scenario("scenario has fewer than 4 frames".into()));
    }
    let pattern = solve_pattern(&chain, scenario, heels)?;
    let mut warnings = Vec::new();

    let sub = (1.0 / (scenario.frame_rate * 0.002)).ceil().max(1.0) as usize;
    let fine: Vec<f64> = (0..=(times.len() - 1) * sub).map(|k| k as f64 / (scenario.frame_rate * sub as f64)).collect();
    let mut walk = integrate(&chain, &pattern, &fine, heels)?;
    let speed = scenario.gait.speed.unwrap_or_else(|| scenario.derived_speed());
    if walk.stance_foot.iter().all(Option::is_none) {
        warnings.push("degenerate scenario: no periodic motion, no stance events".into());
        for (pose, &t) in walk.poses.iter_mut().zip(&fine) {
            pose[0] = speed * t;
        }
    }
    // Centre the walk on the origin.
    let (x0, x1) = (walk.poses[0][0], walk.poses[walk.poses.len() - 1][0]);
    let shift = -0.5 * (x0 + x1);
    for p in walk.poses.iter_mut() {
        p[0] += shift;
    }
    for p in walk.planted.iter_mut() {
        p[0] += shift;
    }

    for (k, pose) in walk.poses.iter().enumerate().step_by(sub) {
        for (j, seg) in chain.segments().iter().enumerate() {
            let q = pose[ROOT_DOF + j];
            if q < seg.limits[0] || q > seg.limits[1] {
                return Err(Error::Scenario(format!(
                    "joint {} at {q:.3} rad leaves its limits at t = {:.3}",
                    seg.name, fine[k]
                )));
            }
        }
    }

    let zero = SiteOffsets::zeros(&chain);
    let poses: Vec<Vec<f64>> = walk.poses.iter().step_by(sub).cloned().collect();
    let sites = poses.iter().map(|p| forward_kinematics_pose(&chain, p, &zero)).collect::<Result<Vec<_>>>()?;

    let mut stance = Vec::new();
    let mut events = Vec::new();
    for (foot, i, j) in stance_runs(&walk) {
        let Some(heel_center) = median_frame_time(&times, fine[i], fine[j]) else { continue };
        let phase = StancePhase { foot, contact: fine[i], toe_off: fine[j], heel_center, source: StanceSource::Truth };
        let side = matches!(foot, Foot::Right) as usize;
        let at = forward_kinematics_pose(&chain, &walk.poses[i], &zero)?;
        let (h, toe) = (at[heels[side]], at[toes[side]]);
        let dir = [toe[0] - h[0], toe[1] - h[1]];
        let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt().max(1e-12);
        let off = scenario.heel_offset_mm / 1000.0;
        let p = walk.planted[i];
        events.push(HeelEvent { stance: phase.clone(), reference: [p[0] + off * dir[0] / len, p[1] + off * dir[1] / len, 0.0] });
        stance.push(phase);
    }

    let bundle = GroundTruthBundle {
        schema_version: SCHEMA_VERSION,
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        times,
        poses,
        sites,
        stance,
        events,
        walkway: WalkwayTransform::identity(),
        heel_sites: heels,
        speed,
        noise_scales: Vec::new(),
        outliers: Vec::new(),
        warnings,
    };
    Ok((bundle, chain))
}

/// Noisy multi-camera keypoints of the bundle's site trajectories. Fills
/// the bundle's noise scales and outlier list.
pub fn render_observations(bundle: &mut GroundTruthBundle, rig: &CameraRig, noise: &NoiseSpec, seed: u64) -> Result<ObservationSet> {
    let c = rig.len();
    let k = bundle.sites.first().map_or(0, Vec::len);
    let coupling = noise.coupling();
    for o in &noise.occlusions {
        if let Some(&bad) = o.cameras.iter().find(|&&i| i >= c) {
            return Err(Error::Scenario(format!("occlusion names camera {bad} of {c}")));
        }
    }
    let mut frames = Vec::with_capacity(bundle.times.len());
    let mut scales = Vec::with_capacity(bundle.times.len());
    let mut outliers = Vec::new();
    let mut ever_in_front = vec![vec![false; k]; c];
    for (f, (&t, sites)) in bundle.times.iter().zip(&bundle.sites).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0x0B5E_12E5, f as u64));
        let mult = noise.multiplier(t);
        let mut views = Vec::with_capacity(c);
        let mut frame_scales = vec![vec![0.0; k]; c];
        for (ci, cam) in rig.cameras().iter().enumerate() {
            let occluded: Vec<bool> = (0..k)
                .map(|ki| {
                    noise.occlusions.iter().any(|o| {
                        (o.start..=o.end).contains(&t)
                            && o.cameras.contains(&ci)
                            && o.keypoints.as_ref().is_none_or(|ks| ks.contains(&ki))
                    })
                })
                .collect();
            let [w, h] = cam.intrinsics.image_size;
            let mut view = View { kp: vec![[0.0; 2]; k], score: vec![0.0; k], vis: vec![false; k] };
            for ki in 0..k {
                // Draw every variate so streams do not depend on visibility.
                let z: f64 = rng.sample(StandardNormal);
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                let jitter: f64 = rng.sample(StandardNormal);
                let is_outlier = rng.random::<f64>() < noise.outlier_rate;
                let dropped = rng.random::<f64>() < noise.dropout_rate;
                let (ox, oy, os) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
                let pc = cam.to_camera(&crate::geometry::Vec3(sites[ki]));
                let Some(px) = cam.pixel(&pc) else { continue };
                ever_in_front[ci][ki] = true;
                if occluded[ki] || dropped {
                    continue;
                }
                let sigma = noise.sigma_px * mult * (noise.spread * z).exp();
                frame_scales[ci][ki] = sigma;
                view.vis[ki] = true;
                if is_outlier {
                    view.kp[ki] = [ox * w, oy * h];
                    view.score[ki] = 0.2 * os;
                    outliers.push((f, ci, ki));
                } else {
                    view.kp[ki] = [px[0] + sigma * nx, px[1] + sigma * ny];
                    view.score[ki] = (coupling.score_for(sigma) + noise.score_jitter * jitter).clamp(0.0, 1.0);
                }
            }
            views.push((view.visible_count() > 0).then_some(view));
        }
        frames.push(Frame { t, views });
        scales.push(frame_scales);
    }
    for (ci, row) in ever_in_front.iter().enumerate() {
        if let Some(ki) = row.iter().position(|v| !v) {
            return Err(Error::Scenario(format!("keypoint {ki} is behind camera {ci} for the whole trial")));
        }
    }
    let obs = ObservationSet::new(frames, c, k)?;
    let counts = obs.frames().iter().map(|f| f.views.iter().flatten().count()).sum::<usize>() as f64 / obs.len() as f64;
    if counts < 2.0 {
        return Err(Error::Scenario(format!("occlusions leave {counts:.2} cameras per frame on average")));
    }
    bundle.noise_scales = scales;
    bundle.outliers = outliers;
    Ok(obs)
}

/// Bundle for arbitrary poses of any chain, without gait events.
pub fn bundle_from_poses(chain: &KinematicChain, name: &str, times: Vec<f64>, poses: Vec<Vec<f64>>) -> Result<GroundTruthBundle> {
    let zero = SiteOffsets::zeros(chain);
    let sites = poses.iter().map(|p| forward_kinematics_pose(chain, p, &zero)).collect::<Result<Vec<_>>>()?;
    Ok(GroundTruthBundle {
        schema_version: SCHEMA_VERSION,
        scenario: name.into(),
        seed: 0,
        times,
        poses,
        sites,
        stance: Vec::new(),
        events: Vec::new(),
        walkway: WalkwayTransform::identity(),
        heel_sites: [0, 0],
        speed: 0.0,
        noise_scales: Vec::new(),
        outliers: Vec::new(),
        warnings: Vec::new(),
    })
}

/// Walked distance of the root along `x`, used to lay out cameras.
pub fn walk_length(bundle: &GroundTruthBundle) -> f64 {
    let xs = bundle.poses.iter().map(|p| p[0]);
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    (hi - lo).max(1.0)
}

/// A complete simulated trial.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub scenario: GaitScenario,
    pub chain: KinematicChain,
    pub rig: CameraRig,
    pub truth: GroundTruthBundle,
    pub observations: ObservationSet,
}

pub fn simulate(scenario: &GaitScenario) -> Result<Simulation> {
    let (mut truth, chain) = generate_trajectory(scenario)?;
    let rig = scenario.rig.build(walk_length(&truth))?;
    let observations = render_observations(&mut truth, &rig, &scenario.noise, scenario.seed)?;
    Ok(Simulation { scenario: scenario.clone(), chain, rig, truth, observations })
}

/// Smooth random joint motion of an arbitrary chain with a fixed root pose,
/// staying inside the joint limits.
pub fn harmonic_poses(chain: &KinematicChain, root: [f64; 6], times: &[f64], amplitude: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<(f64, f64, f64, f64)> = chain
        .segments()
        .iter()
        .map(|s| {
            let mid = 0.5 * (s.limits[0] + s.limits[1]);
            let room = 0.5 * (s.limits[1] - s.limits[0]);
            let amp = amplitude.min(0.8 * room) * rng.random_range(0.5..1.0);
            (mid.clamp(s.limits[0] + amp, s.limits[1] - amp), amp, rng.random_range(0.3..1.0), rng.random_range(0.0..TAU))
        })
        .collect();
    times
        .iter()
        .map(|&t| {
            root.iter()
                .copied()
                .chain(params.iter().map(|&(c, a, f, p)| c + a * (TAU * f * t + p).sin()))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walker_hits_step_targets() {
        let (truth, _) = generate_trajectory(&Fixture::Noisy.scenario(1)).unwrap();
        let steps = truth.step_lengths();
        assert!(steps.len() >= 15, "{} steps", steps.len());
        for (_, s) in &steps {
            assert!((s - 650.0).abs() < 0.05 * 650.0, "step {s}");
        }
        let (asym, _) = generate_trajectory(&Fixture::Asymmetric.scenario(1)).unwrap();
        let steps = asym.step_lengths();
        let mean = |f: Foot| {
            let v: Vec<f64> = steps.iter().filter(|s| s.0 == f).map(|s| s.1).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((mean(Foot::Right) / mean(Foot::Left) - 1.2).abs() < 0.01);
    }

    #[test]
    fn render_is_deterministic_and_covers_frames() {
        let a = simulate(&Fixture::Noisy.scenario(3)).unwrap();
        let b = simulate(&Fixture::Noisy.scenario(3)).unwrap();
        assert_eq!(a.observations, b.observations);
        assert_eq!(a.observations.len(), 120);
        assert!(a.observations.visible_counts().iter().all(|&n| n >= 2 * 14));
    }

    #[test]
    fn degenerate_and_invalid_scenarios() {
        let mut s = Fixture::Clean.scenario(0);
        s.gait.amplitude = 0.0;
        let (truth, _) = generate_trajectory(&s).unwrap();
        assert!(truth.stance.is_empty() && !truth.warnings.is_empty());
        let mut s = Fixture::Clean.scenario(0);
        s.gait.step_length_mm = 3000.0;
        assert!(matches!(generate_trajectory(&s), Err(Error::Scenario(_))));
        let mut s = Fixture::Clean.scenario(0);
        s.gait.speed = Some(3.0);
        assert!(matches!(s.validate(), Err(Error::Scenario(_))));
    }
}
