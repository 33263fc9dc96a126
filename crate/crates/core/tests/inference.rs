use calmocap_core::ad::{inverse_softplus, Tape};
use calmocap_core::camera::{project, CameraRig, Intrinsics};
use calmocap_core::chain::{forward_kinematics_pose, KinematicChain, SiteOffsets};
use calmocap_core::inference::*;
use calmocap_core::observation::{Frame, ObservationSet, View};
use calmocap_core::synth::{bundle_from_poses, harmonic_poses, render_observations, simulate, Fixture, NoiseSpec};
use calmocap_core::trajectory::{SplineBasis, VariationalTrajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rig(count: usize) -> CameraRig {
    let k = Intrinsics { fx: 800.0, fy: 800.0, cx: 320.0, cy: 240.0, image_size: [640.0, 480.0] };
    CameraRig::ring(count, [0.0, 0.0, 1.0], [3.0, 3.0], 1.2, k).unwrap()
}

/// Static pose observed with `residual(frame, cam, kp)` added to the exact
/// projections; every keypoint has score `score`.
fn static_observations(
    chain: &KinematicChain,
    rig: &CameraRig,
    pose: &[f64],
    frames: usize,
    score: f64,
    mut residual: impl FnMut(usize, usize, usize) -> [f64; 2],
) -> ObservationSet {
    let sites = forward_kinematics_pose(chain, pose, &SiteOffsets::zeros(chain)).unwrap();
    let k = sites.len();
    let frames = (0..frames)
        .map(|f| Frame {
            t: f as f64 * 0.1,
            views: (0..rig.len())
                .map(|c| {
                    let kp = (0..k)
                        .map(|i| {
                            let px = project(rig, c, sites[i]).unwrap();
                            let r = residual(f, c, i);
                            [px[0] + r[0], px[1] + r[1]]
                        })
                        .collect();
                    Some(View { kp, score: vec![score; k], vis: vec![true; k] })
                })
                .collect(),
        })
        .collect();
    ObservationSet::new(frames, rig.len(), k).unwrap()
}

/// Nearly deterministic trajectory held at `pose`.
fn sharp(pose: &[f64], obs: &ObservationSet) -> VariationalTrajectory {
    let (t0, t1) = obs.span();
    VariationalTrajectory::constant(SplineBasis::new(t0, t1, 2).unwrap(), pose, 1, 1e-4 + 1e-9).unwrap()
}

fn flat_noise(sigma: f64) -> NoiseModel {
    NoiseModel { a: 0.0, b: inverse_softplus(sigma) }
}

#[test]
fn single_keypoint_nll_matches_formula() {
    let chain = KinematicChain::serial(1, 0.3, [0.0, 0.0, 1.0]);
    let rig = rig(2);
    let pose = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.2];
    let mut obs = static_observations(&chain, &rig, &pose, 2, 0.9, |_, _, _| [0.6, 0.8]);
    // Keep one keypoint in one camera of one frame.
    let frames: Vec<Frame> = obs
        .frames()
        .iter()
        .enumerate()
        .map(|(f, fr)| {
            let mut fr = fr.clone();
            for (c, v) in fr.views.iter_mut().enumerate() {
                let v = v.as_mut().unwrap();
                for (k, vis) in v.vis.iter_mut().enumerate() {
                    *vis = f == 0 && c == 0 && k == 1;
                }
            }
            fr
        })
        .collect();
    obs = ObservationSet::new(frames, 2, 2).unwrap();
    let traj = sharp(&pose, &obs);
    let nll = keypoint_nll(&traj, &chain, &SiteOffsets::zeros(&chain), &rig, &obs, &flat_noise(1.0), 4000, 1).unwrap();
    let expected = 0.5 + (2.0 * std::f64::consts::PI).ln();
    assert!((nll - expected).abs() < 2e-3, "{nll} vs {expected}");
}

#[test]
fn nll_is_additive_over_cameras() {
    let chain = KinematicChain::lower_body();
    let rig = rig(3);
    let mut pose = vec![0.0; chain.pose_dim()];
    pose[2] = 0.95;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let obs = static_observations(&chain, &rig, &pose, 3, 0.8, |_, _, _| {
        [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)]
    });
    let mut traj = sharp(&pose, &obs);
    traj.raw_diag.iter_mut().for_each(|v| *v = inverse_softplus(0.01));
    let offsets = SiteOffsets::zeros(&chain);
    let noise = NoiseModel::default();
    let nll = |o: &ObservationSet| keypoint_nll(&traj, &chain, &offsets, &rig, o, &noise, 4, 3).unwrap();
    let total = nll(&obs);
    let without_0 = nll(&obs.without_camera(0));
    let only_0 = nll(&obs.without_camera(1).without_camera(2));
    assert!((total - without_0 - only_0).abs() < 1e-9 * total.abs(), "{total} vs {without_0} + {only_0}");
}

fn ece_for(sigma_true: f64, sigma_pred: f64, zero: bool) -> f64 {
    let chain = KinematicChain::lower_body();
    let rig = rig(4);
    let mut pose = vec![0.0; chain.pose_dim()];
    pose[2] = 0.95;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let obs = static_observations(&chain, &rig, &pose, 180, 0.9, |_, _, _| {
        if zero {
            [0.0, 0.0]
        } else {
            let z: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            [sigma_true * z[0], sigma_true * z[1]]
        }
    });
    let traj = sharp(&pose, &obs);
    internal_ece(
        &traj,
        &chain,
        &SiteOffsets::zeros(&chain),
        &rig,
        &obs,
        &flat_noise(sigma_pred),
        0.0,
        InternalEceScale::Predictive,
        4,
        2,
    )
    .unwrap()
}

#[test]
fn internal_ece_oracles() {
    let matched = ece_for(2.0, 2.0, false);
    assert!(matched < 0.02, "matched {matched}");
    let halved = ece_for(2.0, 1.0, false);
    assert!(halved > matched + 0.05, "halved {halved}");
    let degenerate = ece_for(2.0, 2.0, true);
    assert!((degenerate - 0.5).abs() < 1e-3, "zero residuals {degenerate}");
}

#[test]
fn internal_ece_needs_enough_confident_keypoints() {
    let chain = KinematicChain::serial(1, 0.3, [0.0, 0.0, 1.0]);
    let rig = rig(2);
    let pose = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.2];
    let obs = static_observations(&chain, &rig, &pose, 2, 0.9, |_, _, _| [0.1, 0.1]);
    let traj = sharp(&pose, &obs);
    let r = internal_ece(&traj, &chain, &SiteOffsets::zeros(&chain), &rig, &obs, &NoiseModel::default(), 0.8, InternalEceScale::Predictive, 4, 1);
    assert!(matches!(r, Err(calmocap_core::error::Error::InsufficientData(_))), "{r:?}");
}

fn tiny_problem() -> (KinematicChain, CameraRig, ObservationSet) {
    let chain = KinematicChain::serial(2, 0.4, [0.0, 1.0, 0.0]);
    let times: Vec<f64> = (0..4).map(|k| k as f64 * 0.1).collect();
    let poses = harmonic_poses(&chain, [0.0, 0.0, 1.0, 0.1, 0.2, 0.3], &times, 0.5, 3);
    let mut bundle = bundle_from_poses(&chain, "tiny", times, poses).unwrap();
    let rig = rig(2);
    let noise = NoiseSpec { outlier_rate: 0.0, ..NoiseSpec::default() };
    let obs = render_observations(&mut bundle, &rig, &noise, 5).unwrap();
    (chain, rig, obs)
}

fn tiny_config() -> FitConfig {
    let mut config = FitConfig { rank: 2, top_quantile: 0.0, knot_spacing: 0.1, ..FitConfig::default() };
    config.weights.iterations = 10;
    config
}

#[test]
fn composite_gradient_passes_and_faulty_gradient_fails() {
    let (chain, rig, obs) = tiny_problem();
    let config = tiny_config();
    let (t0, t1) = obs.span();
    let problem = Problem::new(&chain, &rig, &obs, &config, SplineBasis::with_spacing(t0, t1, 0.1).unwrap(), 7).unwrap();
    let mut p = problem.initial_parameters(&obs).unwrap();
    for (i, v) in p.iter_mut().enumerate() {
        *v += 0.01 * ((i * 7919 % 13) as f64 - 6.0) / 6.0;
    }
    let mut tape = Tape::new();
    let good = gradient_check(|q| problem.loss_and_gradient(q, 10, &mut tape).map(|(b, g, _)| (b.total, g)), &p, 1).unwrap();
    assert!(good.max_relative_error < 1e-4, "{good:?}");
    let bad = gradient_check(
        |q| {
            problem.loss_and_gradient(q, 10, &mut tape).map(|(b, mut g, _)| {
                g[3] *= 1.1;
                (b.total, g)
            })
        },
        &p,
        1,
    )
    .unwrap();
    assert!(bad.max_relative_error > 1e-2 && bad.worst_index == 3, "{bad:?}");
}

#[test]
fn breakdown_identity_holds_at_every_logged_iterate() {
    let (chain, rig, obs) = tiny_problem();
    let mut config = tiny_config();
    config.weights.lambda_site = 0.0;
    config.weights.lambda_excess = 0.0;
    config.weights.lambda_ece = 0.0;
    config.log_every = 1;
    config.weights.iterations = 20;
    let fit = fit(&obs, &chain, &rig, &config, 2).unwrap();
    assert_eq!(fit.report.trace.len(), 21);
    for row in &fit.report.trace {
        let sum = row.nll + row.entropy + row.site + row.excess + row.calibration;
        assert!((sum - row.total).abs() < 1e-9, "{row:?}");
    }
    let b = &fit.report.breakdown;
    assert!((b.nll + b.entropy + b.site + b.excess + b.calibration - b.total).abs() < 1e-9);
}

#[test]
fn fits_are_deterministic_in_serialized_form() {
    let (chain, rig, obs) = tiny_problem();
    let config = tiny_config();
    let a = fit(&obs, &chain, &rig, &config, 3).unwrap();
    let b = fit(&obs, &chain, &rig, &config, 3).unwrap();
    assert_eq!(a.trajectory.to_json().unwrap(), b.trajectory.to_json().unwrap());
    let strip = |r: &FitReport| serde_json::to_string(&FitReport { wall_time_s: 0.0, ..r.clone() }).unwrap();
    assert_eq!(strip(&a.report), strip(&b.report));
    assert_eq!(a.noise, b.noise);
    let c = fit(&obs, &chain, &rig, &config, 4).unwrap();
    assert_ne!(a.trajectory.to_json().unwrap(), c.trajectory.to_json().unwrap());
}

#[test]
fn internal_ece_falls_after_anneal_onset() {
    // One-sided sign test over 10 seeds: 9 or more decreases give p ≈ 0.011.
    let mut decreases = 0;
    let mut deltas = Vec::new();
    for seed in 0..10 {
        let mut scenario = Fixture::Noisy.scenario(seed);
        scenario.duration = 2.0;
        let sim = simulate(&scenario).unwrap();
        let mut config = FitConfig::synthetic(sim.chain.pose_dim());
        config.weights.iterations = 200;
        config.log_every = 10;
        config.gradient_check_probes = 0;
        let fit = fit(&sim.observations, &sim.chain, &sim.rig, &config, seed).unwrap();
        let trace = fit.report.internal_ece_trace();
        let at = |i: usize| trace.iter().find(|r| r.0 == i).unwrap().1;
        let delta = at(200) - at(100);
        deltas.push(delta);
        decreases += (delta < 0.0) as usize;
    }
    assert!(decreases >= 9, "{decreases}/10 decreases: {deltas:?}");
}
