use calmocap_core::ad::inverse_softplus;
use calmocap_core::gait::*;
use calmocap_core::initialize::fit_spline_coefficients;
use calmocap_core::stats;
use calmocap_core::synth::{generate_trajectory, Fixture, GroundTruthBundle};
use calmocap_core::trajectory::{SplineBasis, VariationalTrajectory};
use calmocap_core::chain::{KinematicChain, SiteOffsets};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Trajectory whose mean interpolates the ground-truth poses, with a small
/// isotropic spread.
fn truth_trajectory(truth: &GroundTruthBundle, spread: f64) -> VariationalTrajectory {
    let (t0, t1) = (truth.times[0], *truth.times.last().unwrap());
    let basis = SplineBasis::with_spacing(t0, t1, 0.1).unwrap();
    let dim = truth.poses[0].len();
    let mean = fit_spline_coefficients(&basis, &truth.times, &truth.poses, 1e-9).unwrap();
    let b = basis.count();
    VariationalTrajectory {
        basis,
        dim,
        rank: 1,
        mean,
        factor: vec![0.0; b * dim],
        raw_diag: vec![inverse_softplus(spread - 1e-4); b * dim],
    }
}

fn posterior(truth: &GroundTruthBundle, chain: &KinematicChain, spread: f64, seed: u64) -> MetricPosterior {
    let traj = truth_trajectory(truth, spread);
    let options = MetricOptions { samples: 400, ..MetricOptions::default() };
    metric_posterior(&traj, chain, &SiteOffsets::zeros(chain), &truth.events, truth.heel_sites, &truth.walkway, &options, seed)
        .unwrap()
}

#[test]
fn truth_metrics_close_the_loop_with_scenario_targets() {
    let scenario = Fixture::Clean.scenario(4);
    let (truth, chain) = generate_trajectory(&scenario).unwrap();
    let post = posterior(&truth, &chain, 1e-4 + 1e-6, 4);
    let steps: Vec<&GaitMetricSample> = post.metrics.iter().filter(|m| m.kind == MetricKind::Step).collect();
    let strides: Vec<&GaitMetricSample> = post.metrics.iter().filter(|m| m.kind == MetricKind::Stride).collect();
    assert!(steps.len() >= 15 && strides.len() >= 14);
    let target = scenario.gait.step_length_mm;
    for m in &steps {
        assert!((m.ground_truth - target).abs() < 0.05 * target, "step {}", m.ground_truth);
        assert!(m.error < 2.0, "posterior median {} vs truth {}", m.median, m.ground_truth);
    }
    for m in &strides {
        assert!((m.ground_truth - 2.0 * target).abs() < 0.05 * 2.0 * target, "stride {}", m.ground_truth);
    }
    let mean_step = stats::mean(&steps.iter().map(|m| m.ground_truth).collect::<Vec<_>>());
    assert!((mean_step - target).abs() < 0.01 * target, "mean step {mean_step}");
}

#[test]
fn metric_posterior_is_reproducible() {
    let (truth, chain) = generate_trajectory(&Fixture::Noisy.scenario(2)).unwrap();
    let a = posterior(&truth, &chain, 0.01, 9);
    let b = posterior(&truth, &chain, 0.01, 9);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let bits = |p: &MetricPosterior| p.metrics.iter().flat_map(|m| m.samples.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&posterior(&truth, &chain, 0.01, 10)));
}

#[test]
fn calibrated_samples_rank_uncertainty_with_error() {
    let mut pooled = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..100 {
            let sigma = (Normal::new(0.0, 0.7).unwrap().sample(&mut rng) as f64).exp() * 5.0;
            let center = 650.0 + Normal::new(0.0, 30.0).unwrap().sample(&mut rng);
            let posterior = Normal::new(center, sigma).unwrap();
            let samples: Vec<f64> = (0..500).map(|_| posterior.sample(&mut rng)).collect();
            let truth = posterior.sample(&mut rng);
            pooled.push(GaitMetricSample::from_samples(MetricKind::Step, Foot::Left, i as f64, samples, truth).unwrap());
        }
    }
    let summary = stratify_by_uncertainty(&pooled, &StrataScheme::default()).unwrap();
    assert_eq!(pooled.len(), 500);
    assert!(summary.spearman > 0.2, "spearman {}", summary.spearman);
    let all = summary.stratum("all").unwrap();
    assert!(summary.stratum("below_p50").unwrap().error_median < all.error_median);
    assert!(summary.stratum("bottom_p10").unwrap().error_median < summary.stratum("top_p10").unwrap().error_median);
}

proptest! {
    #[test]
    fn lengthwise_metrics_ignore_lateral_and_vertical_offsets(
        a in prop::array::uniform2(-5.0f64..5.0),
        b in prop::array::uniform2(-5.0f64..5.0),
        lateral in prop::array::uniform2(-0.5f64..0.5),
        vertical in prop::array::uniform2(-0.5f64..0.5),
        angle in -3.1f64..3.1,
        origin in prop::array::uniform2(-2.0f64..2.0),
    ) {
        let base_step = step_length(Foot::Left, a, Foot::Right, b).unwrap();
        let moved_step = step_length(Foot::Left, [a[0], a[1] + lateral[0]], Foot::Right, [b[0], b[1] + lateral[1]]).unwrap();
        prop_assert_eq!(base_step, moved_step);
        let stride = |p: [f64; 2], q: [f64; 2]| stride_length(Foot::Left, p, Foot::Left, q, StrideConvention::Lengthwise).unwrap();
        prop_assert_eq!(stride(a, b), stride([a[0], a[1] - lateral[0]], [b[0], b[1] + lateral[1]]));

        let frame = WalkwayTransform { angle, origin };
        let world = [a[0], a[1], 0.1];
        let lifted = [a[0], a[1], 0.1 + vertical[0]];
        let (p, q) = (frame.apply(world), frame.apply(lifted));
        prop_assert_eq!([p[0], p[1]], [q[0], q[1]]);
    }

    #[test]
    fn bias_correction_leaves_no_residual_bias(
        frames in 2usize..30,
        offsets in proptest::collection::vec(prop::array::uniform3(-0.5f64..0.5), 3),
        noise_seed in any::<u64>(),
    ) {
        let joints: Vec<String> = ["hip", "knee", "ankle"].iter().map(|s| s.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut trials = Vec::new();
        for (p, offset) in offsets.iter().enumerate() {
            for _ in 0..2 {
                let reference: Vec<Vec<f64>> = (0..frames).map(|_| (0..3).map(|_| normal.sample(&mut rng)).collect()).collect();
                let predicted = reference
                    .iter()
                    .map(|r| r.iter().zip(offset).map(|(v, o)| v + o + normal.sample(&mut rng)).collect())
                    .collect();
                trials.push(TrialSeries { participant: format!("p{p}"), predicted, reference });
            }
        }
        let ids: Vec<String> = (0..3).map(|p| format!("p{p}")).collect();
        let (_, corrected) = bias_correct(&trials, &ids, &joints).unwrap();
        let again: Vec<TrialSeries> = trials
            .iter()
            .zip(corrected)
            .map(|(t, c)| TrialSeries { participant: t.participant.clone(), predicted: c, reference: t.reference.clone() })
            .collect();
        let (table, _) = bias_correct(&again, &ids, &joints).unwrap();
        prop_assert_eq!(table.rows.len(), 9);
        for row in &table.rows {
            prop_assert!(row.bias.abs() < 1e-9, "{row:?}");
        }
    }
}
