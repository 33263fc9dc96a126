use calmocap_core::trajectory::{gaussian_entropy, PosteriorMoment, SplineBasis, VariationalTrajectory};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dense_entropy(factor: &[f64], diag: &[f64], rank: usize) -> f64 {
    let d = diag.len();
    let u = DMatrix::from_row_slice(d, rank, factor);
    let cov = &u * u.transpose() + DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(d, diag.iter().map(|v| v * v)));
    let logdet: f64 = cov.symmetric_eigen().eigenvalues.iter().map(|l| l.ln()).sum();
    0.5 * (d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + logdet)
}

prop_compose! {
    fn low_rank()(d in 1usize..=12, r in 1usize..=4)
        (factor in proptest::collection::vec(-1.5f64..1.5, d * r.min(d)),
         diag in proptest::collection::vec(0.05f64..2.0, d),
         r in Just(r.min(d)))
        -> (Vec<f64>, Vec<f64>, usize)
    {
        (factor, diag, r)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn determinant_lemma_matches_dense_log_det((factor, diag, r) in low_rank()) {
        let fast = gaussian_entropy(&factor, &diag, r);
        let dense = dense_entropy(&factor, &diag, r);
        prop_assert!((fast - dense).abs() < 1e-8, "{fast} vs {dense}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn basis_weights_sum_to_one(
        start in -5.0f64..5.0,
        span in 0.1f64..20.0,
        intervals in 1usize..60,
        fractions in proptest::collection::vec(0.0f64..=1.0, 1000),
    ) {
        let basis = SplineBasis::new(start, start + span, intervals).unwrap();
        for f in fractions {
            let (_, w) = basis.weights(start + f * span).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn mean_second_differences_are_bounded_by_coefficient_curvature(
        coeffs in proptest::collection::vec(-2.0f64..2.0, 13),
    ) {
        let basis = SplineBasis::new(0.0, 5.0, 10).unwrap();
        let h = 0.5;
        let mut traj = VariationalTrajectory::constant(basis, &[0.0], 1, 0.1).unwrap();
        traj.mean = coeffs.clone();
        let max_curv = coeffs.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).fold(0.0, f64::max) / (h * h);
        let delta = 1e-3;
        let mut t = delta;
        while t < 5.0 - delta {
            let m = |s: f64| traj.evaluate(s).unwrap().mean[0];
            let second = m(t + delta) - 2.0 * m(t) + m(t - delta);
            prop_assert!(second.abs() <= delta * delta * max_curv * (1.0 + 1e-6) + 1e-12, "t {t}: {second}");
            t += 0.0137;
        }
    }
}

#[test]
fn seeded_sampling_is_bit_reproducible() {
    let moment = PosteriorMoment {
        t: 0.0,
        mean: vec![0.3, -1.0, 2.0],
        factor: vec![0.2, 0.0, 0.1, 0.3, -0.4, 0.05],
        diag: vec![0.1, 0.2, 0.3],
    };
    let a = moment.sample(50, 17);
    let b = moment.sample(50, 17);
    let bits = |s: &Vec<Vec<f64>>| s.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&moment.sample(50, 18)));
}

#[test]
fn sample_covariance_approaches_the_moment() {
    let moment = PosteriorMoment { t: 0.0, mean: vec![1.0, 2.0], factor: vec![0.5, -0.3], diag: vec![0.2, 0.4] };
    let draws = moment.sample(40_000, 3);
    let cov = moment.covariance();
    let n = draws.len() as f64;
    let mean: Vec<f64> = (0..2).map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / n).collect();
    for i in 0..2 {
        for j in 0..2 {
            let c = draws.iter().map(|d| (d[i] - mean[i]) * (d[j] - mean[j])).sum::<f64>() / n;
            assert!((c - cov[i * 2 + j]).abs() < 0.01, "{i}{j}: {c} vs {}", cov[i * 2 + j]);
        }
    }
}
