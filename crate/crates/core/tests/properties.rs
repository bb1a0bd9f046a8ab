use proptest::prelude::*;

use samlab_core::linalg::{dot, norm};
use samlab_core::objectives::{HeteroscedasticSpec, ShiftedQuadraticSpec, TinyMlpSpec, TwoBasinSpec};
use samlab_core::optimizers::fd::{fd_squared_estimate, Probes};
use samlab_core::optimizers::{gibbs_weights, ScoreNormalization};
use samlab_core::stochastic::{
    batch_grad, check_norm_bounds, expected_batch_grad_norm, sample_batch, Combinations, ExpectationMode,
};
use samlab_core::{Ensemble, EnsembleSpec, Objective, SeedStream};

fn families() -> Vec<Ensemble> {
    let rotated = ShiftedQuadraticSpec {
        curvature: vec![0.5, 1.0, 3.0],
        rotate: true,
        ..ShiftedQuadraticSpec::isotropic(3, 6, 1.0, 4)
    };
    [
        EnsembleSpec::ShiftedQuadratic(rotated),
        EnsembleSpec::HeteroscedasticQuadratic(HeteroscedasticSpec::pattern(vec![1.0, 3.0], 3)),
        EnsembleSpec::TwoBasin(TwoBasinSpec::noisy(1)),
        EnsembleSpec::TinyMlp(TinyMlpSpec::standard(1)),
    ]
    .iter()
    .map(|s| s.build().unwrap())
    .collect()
}

fn point(ens: &Ensemble, u: &[f64]) -> Vec<f64> {
    let base = ens.default_start();
    base.iter()
        .enumerate()
        .map(|(j, b)| b + 0.5 * u[j % u.len()] * (1.0 + 0.1 * j as f64))
        .collect()
}

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|j| {
            y[j] = x[j] + h;
            let up = f(&y);
            y[j] = x[j] - h;
            let down = f(&y);
            y[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(p, q)| (p - q).abs() <= tol * (1.0 + q.abs()))
}

fn grad(ens: &Ensemble, i: usize, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; ens.dim()];
    ens.sample_grad_into(i, x, &mut g);
    g
}

fn hvp(ens: &Ensemble, i: usize, x: &[f64], v: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; ens.dim()];
    ens.sample_hvp_into(i, x, v, &mut h);
    h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sample_gradients_match_finite_differences(u in prop::collection::vec(-1.0f64..1.0, 3), i in 0usize..6) {
        for ens in families() {
            let x = point(&ens, &u);
            let fd = central_diff(|y| ens.sample_loss(i, y), &x, 1e-5);
            prop_assert!(close(&grad(&ens, i, &x), &fd, 1e-6), "{}", ens.spec().family_name());
        }
    }

    #[test]
    fn hvps_match_gradient_differences_and_are_linear(
        u in prop::collection::vec(-1.0f64..1.0, 3),
        a in -2.0f64..2.0,
        i in 0usize..6,
    ) {
        for ens in families() {
            let d = ens.dim();
            let x = point(&ens, &u);
            let v: Vec<f64> = (0..d).map(|j| ((j * 7 + 3) % 5) as f64 / 5.0 - 0.4).collect();
            let w: Vec<f64> = (0..d).map(|j| ((j * 3 + 1) % 4) as f64 / 4.0 - 0.3).collect();
            let h = 1e-5;
            let xp: Vec<f64> = x.iter().zip(&v).map(|(p, q)| p + h * q).collect();
            let xm: Vec<f64> = x.iter().zip(&v).map(|(p, q)| p - h * q).collect();
            let fd: Vec<f64> = grad(&ens, i, &xp).iter().zip(grad(&ens, i, &xm)).map(|(p, q)| (p - q) / (2.0 * h)).collect();
            prop_assert!(close(&hvp(&ens, i, &x, &v), &fd, 1e-5));

            let combo: Vec<f64> = v.iter().zip(&w).map(|(p, q)| a * p + q).collect();
            let lhs = hvp(&ens, i, &x, &combo);
            let rhs: Vec<f64> = hvp(&ens, i, &x, &v).iter().zip(hvp(&ens, i, &x, &w)).map(|(p, q)| a * p + q).collect();
            prop_assert!(close(&lhs, &rhs, 1e-10));

            // Hessians are symmetric: wᵀ(Hv) = vᵀ(Hw).
            let s1 = dot(&w, &hvp(&ens, i, &x, &v));
            let s2 = dot(&v, &hvp(&ens, i, &x, &w));
            prop_assert!((s1 - s2).abs() <= 1e-10 * (1.0 + s1.abs()));
        }
    }

    #[test]
    fn noise_trace_gradient_matches_finite_differences(u in prop::collection::vec(-1.0f64..1.0, 3)) {
        for ens in families() {
            let x = point(&ens, &u);
            let mut g = vec![0.0; ens.dim()];
            ens.noise_trace_grad_into(&x, &mut g);
            let fd = central_diff(|y| ens.noise_trace(y), &x, 1e-5);
            prop_assert!(close(&g, &fd, 1e-5), "{}", ens.spec().family_name());
        }
    }

    #[test]
    fn subset_average_of_batch_gradients_is_the_full_gradient(u in prop::collection::vec(-1.0f64..1.0, 3), k in 1usize..4) {
        for ens in families().into_iter().filter(|e| e.num_samples() <= 12) {
            let x = point(&ens, &u);
            let d = ens.dim();
            let mut acc = vec![0.0; d];
            let mut count = 0.0;
            for s in Combinations::new(ens.num_samples(), k) {
                for (a, b) in acc.iter_mut().zip(batch_grad(&ens, &x, &s).unwrap()) {
                    *a += b;
                }
                count += 1.0;
            }
            let mean: Vec<f64> = acc.iter().map(|a| a / count).collect();
            let mut full = vec![0.0; d];
            ens.mean_grad_into(&x, &mut full);
            prop_assert!(close(&mean, &full, 1e-12));
        }
    }

    #[test]
    fn norm_sandwich_holds_exactly(seed in 0u64..1000, k in 1usize..8, u in prop::collection::vec(-2.0f64..2.0, 3)) {
        let ens = EnsembleSpec::ShiftedQuadratic(ShiftedQuadraticSpec::isotropic(3, 8, 1.0, seed)).build().unwrap();
        let r = check_norm_bounds(&ens, &u, k, ExpectationMode::Exact).unwrap();
        prop_assert!(r.holds, "{r:?}");
    }

    #[test]
    fn closed_form_norm_matches_enumeration(x in -2.0f64..2.0, k in 1usize..6) {
        let ens = EnsembleSpec::HeteroscedasticQuadratic(HeteroscedasticSpec::pattern(vec![1.0, 3.0], 4)).build().unwrap();
        let exact = expected_batch_grad_norm(&ens, &[x], k, ExpectationMode::Exact).unwrap().mean;
        let closed = ens.expected_batch_norm_closed_form(&[x], k).unwrap();
        prop_assert!((exact - closed).abs() <= 1e-12 * (1.0 + closed));
    }

    #[test]
    fn batch_plans_are_distinct_in_range_and_reproducible(n in 4usize..40, seed in any::<u64>()) {
        let b = n / 2;
        let plan = sample_batch(n, b, 1, &SeedStream::new(seed)).unwrap();
        let mut g = plan.gamma().to_vec();
        let again = sample_batch(n, b, 1, &SeedStream::new(seed)).unwrap();
        prop_assert_eq!(plan.gamma(), again.gamma());
        g.sort_unstable();
        g.dedup();
        prop_assert_eq!(g.len(), b);
        prop_assert!(g.iter().all(|&i| i < n));
    }

    #[test]
    fn gibbs_weights_lie_on_the_simplex(scores in prop::collection::vec(0.0f64..10.0, 1..12), lambda in 0.0f64..8.0) {
        let w = gibbs_weights(&scores, lambda, ScoreNormalization::Standardize);
        prop_assert!(w.weights.iter().all(|p| *p >= 0.0));
        prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gibbs_entropy_is_non_increasing_in_lambda(scores in prop::collection::vec(0.0f64..10.0, 2..12), l1 in 0.0f64..4.0, dl in 0.0f64..4.0) {
        let a = gibbs_weights(&scores, l1, ScoreNormalization::Standardize).entropy();
        let b = gibbs_weights(&scores, l1 + dl, ScoreNormalization::Standardize).entropy();
        prop_assert!(b <= a + 1e-12);
    }

    #[test]
    fn exhaustive_probes_recover_linear_gradient_norms(c in prop::collection::vec(-3.0f64..3.0, 1..6), delta in 1e-4f64..1.0) {
        let c2 = c.clone();
        let est = fd_squared_estimate(move |y: &[f64]| dot(&c2, y), &vec![0.3; c.len()], delta, Probes::ExhaustiveRademacher).unwrap();
        let target = norm(&c).powi(2);
        prop_assert!((est - target).abs() <= 1e-9 * (1.0 + target));
    }
}

#[test]
fn descriptors_round_trip_byte_identically() {
    for ens in families() {
        let json = ens.descriptor();
        let spec = EnsembleSpec::from_json(&json).unwrap();
        assert_eq!(spec.to_json(), json);
        let rebuilt = spec.build().unwrap();
        let x = point(&ens, &[0.2, -0.1, 0.4]);
        assert_eq!(rebuilt.mean_loss(&x).to_bits(), ens.mean_loss(&x).to_bits());
    }
}

#[test]
fn malformed_descriptors_are_rejected() {
    assert!(EnsembleSpec::from_json(r#"{"family":"nope"}"#).is_err());
    assert!(EnsembleSpec::from_json(r#"{"family":"tiny_mlp","seed":1}"#).is_err());
}
