use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use qqnet::quantreg::{weighted_objective, weighted_quantile_regression};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Primal LP: min Σ wᵢ(τuᵢ + (1−τ)vᵢ) s.t. Xb + u − v = y, u, v ≥ 0.
fn lp_oracle(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, tau: f64) -> f64 {
    let (n, p) = x.shape();
    let mut pb = Problem::new(OptimizationDirection::Minimize);
    let b: Vec<_> = (0..p).map(|_| pb.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    for i in 0..n {
        let u = pb.add_var(w[i] * tau, (0.0, f64::INFINITY));
        let v = pb.add_var(w[i] * (1.0 - tau), (0.0, f64::INFINITY));
        let mut row: Vec<_> = (0..p).map(|j| (b[j], x[(i, j)])).collect();
        row.push((u, 1.0));
        row.push((v, -1.0));
        pb.add_constraint(&row, ComparisonOp::Eq, y[i]);
    }
    pb.solve().unwrap().objective()
}

fn instance(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { StandardNormal.sample(&mut rng) });
    let y = DVector::from_fn(n, |i, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        let h: f64 = x[(i, p.min(2) - 1)];
        x.row(i).sum() + (1.0 + h.abs()) * e
    });
    let w = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0);
    (x, y, w)
}

#[test]
fn matches_lp_oracle_on_random_instances() {
    for seed in 0..30u64 {
        let n = 20 + (seed as usize * 7) % 60;
        let p = 1 + seed as usize % 5;
        let tau = [0.05, 0.25, 0.5, 0.75, 0.95][seed as usize % 5];
        let (x, y, w) = instance(n, p, seed);
        let fit = weighted_quantile_regression(&x, &y, &w, tau).unwrap();
        let oracle = lp_oracle(&x, &y, &w, tau);
        let scale = oracle.abs().max(1.0);
        assert!((fit.objective - oracle).abs() < 1e-8 * scale, "seed {seed}: {} vs {oracle}", fit.objective);
        assert!(fit.duality_gap().abs() < 1e-8 * scale, "seed {seed}: gap {}", fit.duality_gap());
    }
}

#[test]
fn tied_and_discrete_responses() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 60;
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i % 4) as f64 });
    let y = DVector::from_fn(n, |_, _| rng.random_range(0..3) as f64);
    let w = DVector::from_element(n, 1.0);
    for tau in [0.2, 0.5, 0.8] {
        let fit = weighted_quantile_regression(&x, &y, &w, tau).unwrap();
        let oracle = lp_oracle(&x, &y, &w, tau);
        assert!((fit.objective - oracle).abs() < 1e-9 * oracle.max(1.0));
    }
}

#[test]
fn kernel_like_weights_spanning_many_magnitudes() {
    let n = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] - 0.3 });
    let y = DVector::from_fn(n, |i, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        xs[i] * 2.0 + e * 0.2
    });
    let w = DVector::from_fn(n, |i, _| (-0.5 * ((xs[i] - 0.3) / 0.05).powi(2)).exp() / 0.05);
    for tau in [0.1, 0.5, 0.9] {
        let fit = weighted_quantile_regression(&x, &y, &w, tau).unwrap();
        let oracle = lp_oracle(&x, &y, &w, tau);
        assert!((fit.objective - oracle).abs() < 1e-7 * oracle.max(1.0), "{} vs {oracle}", fit.objective);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn no_coordinate_probe_improves(seed in 0u64..10_000, tau in 0.05f64..0.95) {
        let (x, y, w) = instance(40, 3, seed);
        let fit = weighted_quantile_regression(&x, &y, &w, tau).unwrap();
        let base = weighted_objective(&x, &y, &w, tau, &fit.coefficients);
        for j in 0..3 {
            for d in [-1e-3, 1e-3] {
                let mut b = fit.coefficients.clone();
                b[j] += d;
                prop_assert!(weighted_objective(&x, &y, &w, tau, &b) >= base - 1e-9);
            }
        }
    }

    #[test]
    fn response_scaling_scales_coefficients(seed in 0u64..10_000, c in 0.1f64..10.0) {
        let (x, y, w) = instance(30, 2, seed);
        let a = weighted_quantile_regression(&x, &y, &w, 0.4).unwrap();
        let b = weighted_quantile_regression(&x, &(&y * c), &w, 0.4).unwrap();
        prop_assert!((&a.coefficients * c - &b.coefficients).amax() < 1e-8 * c.max(1.0));
    }
}
