use nalgebra::{DMatrix, DVector};
use qqnet::gam::{
    build_basis, fit_gam_fixed, fit_gam_matrix, GamOptions, SplineBasis,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn uniform_sample(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| rng.random::<f64>())
}

fn noise(n: usize, sd: f64, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, sd).unwrap();
    DVector::from_fn(n, |_, _| d.sample(&mut rng))
}

fn corr(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (ma, mb) = (a.mean(), b.mean());
    let ca = a.add_scalar(-ma);
    let cb = b.add_scalar(-mb);
    ca.dot(&cb) / (ca.norm() * cb.norm())
}

/// ∫ f''² by composite Simpson on a fine grid, f'' evaluated from the basis
/// by central second differences of f.
fn roughness_by_quadrature(basis: &SplineBasis, beta: &DVector<f64>) -> f64 {
    let (a, b) = (basis.knots[0], *basis.knots.last().unwrap());
    let f = |x: f64| basis.row(x).dot(beta);
    let eps = 1e-4;
    let f2 = |x: f64| {
        let x = x.clamp(a + eps, b - eps);
        (f(x + eps) - 2.0 * f(x) + f(x - eps)) / (eps * eps)
    };
    let m = 20_000;
    let h = (b - a) / m as f64;
    let mut s = f2(a).powi(2) + f2(b).powi(2);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f2(a + i as f64 * h).powi(2);
    }
    s * h / 3.0
}

#[test]
fn penalty_matches_quadrature() {
    let x = uniform_sample(400, 1);
    let basis = build_basis("x", x.as_slice(), 9).unwrap();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let beta = DVector::from_fn(9, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let exact = (beta.transpose() * &basis.penalty * &beta)[(0, 0)];
        let quad = roughness_by_quadrature(&basis, &beta);
        assert!(((exact - quad) / exact).abs() < 1e-4, "{exact} vs {quad}");
    }
}

#[test]
fn linear_truth_recovered_with_two_edf() {
    let x = uniform_sample(120, 2);
    let y = x.map(|v| 1.0 + 2.5 * v);
    let fit = fit_gam_matrix(&y, std::slice::from_ref(&x), &["x".into()], &GamOptions::default(), "y").unwrap();
    assert!(fit.residuals.amax() < 1e-6);
    assert!((fit.total_edf - 2.0).abs() < 0.2, "edf {}", fit.total_edf);
    assert!((&fit.fitted + &fit.residuals - &y).amax() < 1e-8);
}

#[test]
fn sine_recovered_within_tolerance() {
    let n = 200;
    let x = uniform_sample(n, 3);
    let truth = x.map(|v| (2.0 * std::f64::consts::PI * v).sin());
    let y = &truth + noise(n, 0.1, 4);
    let fit = fit_gam_matrix(&y, std::slice::from_ref(&x), &["x".into()], &GamOptions::default(), "y").unwrap();
    let err = (&fit.fitted - &truth).amax();
    assert!(err < 0.15, "sup error {err}");
    // smooth is centered
    assert!(fit.terms[0].fitted.mean().abs() < 1e-8);
}

/// Constrained penalized least squares solved through its KKT system:
/// intercept plus raw knot-value coefficients, with a Lagrange multiplier per
/// sum-to-zero constraint.
fn kkt_oracle(y: &DVector<f64>, xs: &[DVector<f64>], lambdas: &[f64], k: usize) -> (DVector<f64>, Vec<DVector<f64>>) {
    let n = y.len();
    let t = xs.len();
    let m = 1 + t * k;
    let mut x = DMatrix::zeros(n, m);
    let mut pen = DMatrix::zeros(m, m);
    x.column_mut(0).fill(1.0);
    let mut constraints = DMatrix::zeros(t, m);
    for (j, xj) in xs.iter().enumerate() {
        let b = build_basis("x", xj.as_slice(), k).unwrap();
        let d = b.design(xj.as_slice());
        x.view_mut((0, 1 + j * k), (n, k)).copy_from(&d);
        pen.view_mut((1 + j * k, 1 + j * k), (k, k)).copy_from(&(&b.penalty * lambdas[j]));
        for c in 0..k {
            constraints[(j, 1 + j * k + c)] = d.column(c).sum();
        }
    }
    let mut sys = DMatrix::zeros(m + t, m + t);
    sys.view_mut((0, 0), (m, m)).copy_from(&(x.transpose() * &x + &pen));
    sys.view_mut((0, m), (m, t)).copy_from(&constraints.transpose());
    sys.view_mut((m, 0), (t, m)).copy_from(&constraints);
    let mut rhs = DVector::zeros(m + t);
    rhs.rows_mut(0, m).copy_from(&(x.transpose() * y));
    let sol = sys.lu().solve(&rhs).unwrap();
    let coef = sol.rows(0, m).into_owned();
    let fitted = &x * &coef;
    let betas = (0..t).map(|j| coef.rows(1 + j * k, k).into_owned()).collect();
    (fitted, betas)
}

#[test]
fn fixed_lambda_matches_kkt_system() {
    let n = 90;
    let x1 = uniform_sample(n, 5);
    let x2 = uniform_sample(n, 6);
    let y = x1.map(|v| (3.0 * v).cos()) + x2.map(|v| v * v) + noise(n, 0.2, 7);
    let lambdas = [0.05, 2.0];
    let fit = fit_gam_fixed(&y, &[x1.clone(), x2.clone()], &["a".into(), "b".into()], &lambdas, 8, "y").unwrap();
    let (fitted, betas) = kkt_oracle(&y, &[x1, x2], &lambdas, 8);
    assert!((&fit.fitted - fitted).amax() < 1e-8);
    for (term, beta) in fit.terms.iter().zip(&betas) {
        let got = DVector::from_vec(term.coefficients.clone());
        assert!((got - beta).amax() < 1e-8);
    }
}

#[test]
fn huge_lambda_gives_linear_fit() {
    let n = 80;
    let x1 = uniform_sample(n, 8);
    let x2 = uniform_sample(n, 9);
    let y = x1.map(|v| (4.0 * v).sin()) + x2.map(|v| v.powi(3)) + noise(n, 0.1, 10);
    let fit = fit_gam_fixed(&y, &[x1.clone(), x2.clone()], &["a".into(), "b".into()], &[1e9, 1e9], 10, "y").unwrap();
    let design = DMatrix::from_columns(&[DVector::from_element(n, 1.0), x1, x2]);
    let ols = design.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    let linear = design * ols;
    let d = (&fit.fitted - linear).amax();
    assert!(d < 1e-4, "diff {d}");
}

#[test]
fn small_lambda_interpolation_limit() {
    let n = 25;
    let x = DVector::from_fn(n, |i, _| i as f64 / (n - 1) as f64);
    let y = x.map(|v| (7.0 * v).sin()) + noise(n, 0.3, 11);
    let mut last = f64::INFINITY;
    for lam in [1e2, 1.0, 1e-2, 1e-4, 1e-6] {
        let fit = fit_gam_fixed(&y, std::slice::from_ref(&x), &["x".into()], &[lam], 20, "y").unwrap();
        assert!(fit.rss() <= last + 1e-12);
        last = fit.rss();
    }
}

#[test]
fn selected_lambda_is_grid_optimal() {
    let n = 150;
    let x = uniform_sample(n, 12);
    let y = x.map(|v| (5.0 * v).sin()) + noise(n, 0.3, 13);
    let opts = GamOptions::default();
    let fit = fit_gam_matrix(&y, std::slice::from_ref(&x), &["x".into()], &opts, "y").unwrap();
    for &lam in &opts.lambda_grid {
        let alt = fit_gam_fixed(&y, std::slice::from_ref(&x), &["x".into()], &[lam], opts.num_basis, "y").unwrap();
        assert!(fit.gcv <= alt.gcv * (1.0 + 1e-9) + 1e-15, "λ={lam}: {} > {}", fit.gcv, alt.gcv);
    }
}

#[test]
fn residuals_orthogonal_to_smooths_up_to_penalty() {
    let n = 120;
    let x1 = uniform_sample(n, 14);
    let x2 = uniform_sample(n, 15);
    let y = x1.map(|v| (3.0 * v).sin()) - x2.map(|v| v * v) + noise(n, 0.2, 16);
    let fit = fit_gam_matrix(&y, &[x1, x2], &["a".into(), "b".into()], &GamOptions::default(), "y").unwrap();
    assert!(fit.residuals.mean().abs() < 1e-8);
    for term in &fit.terms {
        // normal equations: eᵀ f_j = λ_j βᵀ P β
        let lhs = fit.residuals.dot(&term.fitted);
        assert!((lhs - term.lambda * term.wiggliness).abs() < 1e-8, "{lhs} vs {}", term.lambda * term.wiggliness);
        assert!(term.fitted.mean().abs() < 1e-8);
    }
}

#[test]
fn linear_smooths_leave_uncorrelated_residuals() {
    let n = 100;
    let x1 = uniform_sample(n, 17);
    let x2 = uniform_sample(n, 18);
    let y = x1.map(|v| 2.0 * v) - &x2 * 0.5 + noise(n, 0.3, 19);
    let fit = fit_gam_matrix(&y, &[x1, x2], &["a".into(), "b".into()], &GamOptions::default(), "y").unwrap();
    for term in &fit.terms {
        if term.wiggliness * term.lambda < 1e-10 {
            assert!(corr(&fit.residuals, &term.fitted).abs() < 1e-6);
        }
    }
}

#[test]
fn partial_out_behaviour() {
    let n = 300;
    let c1 = uniform_sample(n, 20);
    let c2 = uniform_sample(n, 21);
    let opts = GamOptions::default();
    let codes = ["c1".to_string(), "c2".to_string()];

    // target independent of the controls keeps (nearly) all its variance
    let indep = noise(n, 1.0, 22);
    let fit = fit_gam_matrix(&indep, &[c1.clone(), c2.clone()], &codes, &opts, "t").unwrap();
    let var = |v: &DVector<f64>| v.add_scalar(-v.mean()).norm_squared() / n as f64;
    let ratio = var(&fit.residuals) / var(&indep);
    assert!(ratio > 0.9 && ratio <= 1.0 + 1e-12, "variance ratio {ratio}");
    assert!(fit.residuals.mean().abs() < 1e-8);

    // target equal to one control is fully explained
    let fit = fit_gam_matrix(&c1, &[c1.clone(), c2.clone()], &codes, &opts, "t").unwrap();
    assert!(fit.residuals.amax() < 1e-4);

    // control plus noise leaves the noise behind
    let e = noise(n, 0.2, 23);
    let target = c1.map(|v| (2.0 * v).exp()) + &e;
    let fit = fit_gam_matrix(&target, &[c1.clone(), c2.clone()], &codes, &opts, "t").unwrap();
    assert!(corr(&fit.residuals, &e) > 0.95);
}
