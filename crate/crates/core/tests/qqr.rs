use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use qqnet::qqr::{
    empirical_quantile, export_surface, kernel_weights, local_quantile_fit, qqr_surface, read_surface,
    KernelSpec, LocateOn, QuantileGrid,
};
use qqnet::quantreg::check_loss;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn uniform(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n, |_, _| rng.random::<f64>())
}

fn normal(n: usize, sd: f64, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, sd).unwrap();
    DVector::from_fn(n, |_, _| d.sample(&mut rng))
}

fn no_controls(n: usize) -> DMatrix<f64> {
    DMatrix::zeros(n, 0)
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        DVector::from_vec(r)
    };
    let (ra, rb) = (rank(a), rank(b));
    let (ca, cb) = (ra.add_scalar(-ra.mean()), rb.add_scalar(-rb.mean()));
    ca.dot(&cb) / (ca.norm() * cb.norm())
}

#[test]
fn quantile_matches_order_statistic_scan() {
    let x = normal(50, 1.0, 1);
    let mut sorted: Vec<f64> = x.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    for t in 1..100 {
        let theta = t as f64 / 100.0;
        // smallest x with (#{xᵢ ≤ x})/n ≥ θ
        let brute = sorted
            .iter()
            .copied()
            .find(|&c| x.iter().filter(|&&v| v <= c).count() as f64 / 50.0 >= theta)
            .unwrap();
        assert_eq!(empirical_quantile(x.as_slice(), theta), brute);
    }
}

#[test]
fn kernel_weights_match_formula() {
    let x: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64 * 0.5 + 1.0).collect();
    let theta = 0.3;
    let h = 0.05;
    let phi = |u: f64| (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();

    let rank = kernel_weights(&x, theta, &KernelSpec { bandwidth: h, ..Default::default() }).unwrap();
    for (i, &xi) in x.iter().enumerate() {
        let f = x.iter().filter(|&&v| v <= xi).count() as f64 / 20.0; // no ties
        assert!((rank[i] - phi((f - theta) / h)).abs() < 1e-15);
    }

    let value = kernel_weights(
        &x,
        theta,
        &KernelSpec { bandwidth: h, locate_on: LocateOn::ValueScale, ..Default::default() },
    )
    .unwrap();
    let xq = 3.5; // sorted values 1.0, 1.5, …; 6th of 20
    for (i, &xi) in x.iter().enumerate() {
        assert!((value[i] - phi((xi - xq) / h) / h).abs() < 1e-12);
    }
}

#[test]
fn wide_kernel_flattens_weights() {
    let x = normal(30, 1.0, 2);
    for locate_on in [LocateOn::RankScale, LocateOn::ValueScale] {
        let w = kernel_weights(x.as_slice(), 0.2, &KernelSpec { bandwidth: 1e6, locate_on, ..Default::default() }).unwrap();
        assert!((w.max() - w.min()) / w.max() < 1e-9);
    }
}

#[test]
fn rank_weights_decay_with_rank_distance() {
    let x = normal(60, 1.0, 3);
    let w = kernel_weights(x.as_slice(), 0.4, &KernelSpec::default()).unwrap();
    let mut order: Vec<usize> = (0..60).collect();
    let f = |i: usize| x.iter().filter(|&&v| v <= x[i]).count() as f64 / 60.0;
    order.sort_by(|&a, &b| (f(a) - 0.4).abs().total_cmp(&(f(b) - 0.4).abs()));
    for pair in order.windows(2) {
        assert!(w[pair[1]] <= w[pair[0]]);
    }
}

#[test]
fn noiseless_line_recovered_in_every_cell() {
    let n = 100;
    let x = uniform(n, 4);
    let y = x.map(|v| 2.0 + 3.0 * v);
    let s = qqr_surface(&y, &x, &no_controls(n), &QuantileGrid::central(), &KernelSpec::default()).unwrap();
    assert!(s.skipped_cells.is_empty());
    for c in s.cells.iter().flatten() {
        assert!((c.beta - 3.0).abs() < 1e-6);
        assert!((c.alpha - (2.0 + 3.0 * c.x_theta)).abs() < 1e-6);
    }
}

/// Unweighted median regression through a generic LP.
fn median_regression_objective(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let mut pb = Problem::new(OptimizationDirection::Minimize);
    let a = pb.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY));
    let b = pb.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY));
    for i in 0..y.len() {
        let u = pb.add_var(0.5, (0.0, f64::INFINITY));
        let v = pb.add_var(0.5, (0.0, f64::INFINITY));
        pb.add_constraint([(a, 1.0), (b, x[i]), (u, 1.0), (v, -1.0)], ComparisonOp::Eq, y[i]);
    }
    pb.solve().unwrap().objective()
}

#[test]
fn wide_kernel_median_matches_global_oracle() {
    for seed in 0..10u64 {
        let n = 40 + 5 * seed as usize;
        let x = normal(n, 1.0, 100 + seed);
        let y = x.map(|v| 1.0 - 0.5 * v) + normal(n, 0.7, 200 + seed);
        let oracle = median_regression_objective(&x, &y);
        let spec = KernelSpec { bandwidth: 1e6, ..Default::default() };
        for theta in [0.2, 0.5, 0.8] {
            let fit = local_quantile_fit(&y, &x, &no_controls(n), 0.5, theta, &spec).unwrap();
            let obj: f64 = (0..n)
                .map(|i| check_loss(y[i] - fit.alpha - fit.beta * (x[i] - fit.x_theta), 0.5))
                .sum();
            assert!((obj - oracle).abs() < 1e-6, "seed {seed}: {obj} vs {oracle}");
        }
    }
}

#[test]
fn constant_slope_surface_is_flat() {
    let n = 500;
    let x = normal(n, 1.0, 5);
    let y = x.map(|v| 2.0 + 3.0 * v) + normal(n, 0.1, 6);
    let s = qqr_surface(&y, &x, &no_controls(n), &QuantileGrid::central(), &KernelSpec::default()).unwrap();
    assert_eq!(s.fitted_count(), 81);
    let dev: Vec<f64> = s.cells.iter().flatten().map(|c| (c.beta - 3.0).abs()).collect();
    assert!(dev.iter().all(|&d| d < 0.2));
    assert!(dev.iter().sum::<f64>() / 81.0 < 0.05);
    for c in s.cells.iter().flatten() {
        assert!(c.duality_gap.abs() < 1e-8 * c.objective.max(1.0));
    }
}

#[test]
fn increasing_planted_slope_detected() {
    let n = 1000;
    let x = uniform(n, 7);
    // F(x) = x on the unit interval, so b(F(x)) = 1 + 2x and the local slope is 1 + 4x
    let y = x.map(|v| (1.0 + 2.0 * v) * v) + normal(n, 0.1, 8);
    let grid = QuantileGrid::new(vec![0.5], QuantileGrid::central().thetas).unwrap();
    let s = qqr_surface(&y, &x, &no_controls(n), &grid, &KernelSpec::default()).unwrap();
    let betas: Vec<f64> = (0..9).map(|h| s.beta(0, h).unwrap()).collect();
    assert!(spearman(&grid.thetas, &betas) > 0.9, "{betas:?}");
}

#[test]
fn row_permutation_leaves_surface_unchanged() {
    let n = 120;
    let x = normal(n, 1.0, 9);
    let z = DMatrix::from_fn(n, 2, |i, j| ((i * (j + 3)) % 11) as f64 / 11.0);
    let y = x.map(|v| v * v) + z.column(0) + normal(n, 0.3, 10);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let yp = DVector::from_fn(n, |i, _| y[perm[i]]);
    let xp = DVector::from_fn(n, |i, _| x[perm[i]]);
    let zp = z.select_rows(&perm);
    let grid = QuantileGrid::central();
    let spec = KernelSpec { bandwidth: 0.1, ..Default::default() };
    let a = qqr_surface(&y, &x, &z, &grid, &spec).unwrap();
    let b = qqr_surface(&yp, &xp, &zp, &grid, &spec).unwrap();
    for (ca, cb) in a.cells.iter().zip(&b.cells) {
        match (ca, cb) {
            (Some(ca), Some(cb)) => assert!((ca.beta - cb.beta).abs() < 1e-10),
            (None, None) => {}
            _ => panic!("skip pattern differs"),
        }
    }
}

#[test]
fn scale_and_shift_equivariance() {
    let n = 150;
    let x = normal(n, 1.0, 12);
    let z = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.13).cos());
    let y = x.map(|v| 1.0 + v) + z.column(0) * 0.5 + normal(n, 0.4, 13);
    let spec = KernelSpec { bandwidth: 0.1, ..Default::default() };
    let c = 3.7;
    for (tau, theta) in [(0.2, 0.3), (0.5, 0.5), (0.8, 0.7)] {
        let base = local_quantile_fit(&y, &x, &z, tau, theta, &spec).unwrap();
        let scaled = local_quantile_fit(&(&y * c), &x, &z, tau, theta, &spec).unwrap();
        assert!((scaled.beta - c * base.beta).abs() < 1e-8);
        assert!((scaled.alpha - c * base.alpha).abs() < 1e-8);
        assert!((scaled.gamma[0] - c * base.gamma[0]).abs() < 1e-8);
        let shifted = local_quantile_fit(&y, &x.add_scalar(10.0), &z, tau, theta, &spec).unwrap();
        assert!((shifted.beta - base.beta).abs() < 1e-8);
    }
}

#[test]
fn controls_enter_linearly() {
    let n = 400;
    let x = normal(n, 1.0, 14);
    let z = DMatrix::from_fn(n, 1, |_, _| 0.0) + DMatrix::from_column_slice(n, 1, normal(n, 1.0, 15).as_slice());
    let y = x.map(|v| 1.0 + 2.0 * v) + z.column(0) * 0.5 + normal(n, 0.05, 16);
    let fit = local_quantile_fit(&y, &x, &z, 0.5, 0.5, &KernelSpec { bandwidth: 0.2, ..Default::default() }).unwrap();
    assert!((fit.gamma[0] - 0.5).abs() < 0.05);
    assert!((fit.beta - 2.0).abs() < 0.1);
}

#[test]
fn local_quantiles_ordered_in_tau_for_location_shift() {
    let n = 600;
    let x = uniform(n, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let y = DVector::from_fn(n, |i, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        x[i] + e
    });
    let s = qqr_surface(&y, &x, &no_controls(n), &QuantileGrid::central(), &KernelSpec { bandwidth: 0.1, ..Default::default() }).unwrap();
    for h in 0..9 {
        for t in 1..9 {
            let (lo, hi) = (s.cell(t - 1, h).unwrap().alpha, s.cell(t, h).unwrap().alpha);
            assert!(hi >= lo - 1e-9, "crossing at θ index {h}, τ index {t}");
        }
    }
}

#[test]
fn thin_tails_are_skipped_and_recorded() {
    let n = 30;
    let x = uniform(n, 19);
    let y = &x * 2.0 + normal(n, 0.1, 20);
    let grid = QuantileGrid::new(vec![0.5], vec![0.01, 0.5]).unwrap();
    let s = qqr_surface(&y, &x, &no_controls(n), &grid, &KernelSpec::default()).unwrap();
    assert_eq!(s.cells.len(), 2);
    assert!(s.cell(0, 0).is_none());
    assert_eq!(s.skipped_cells.len(), 1 + s.cell(0, 1).is_none() as usize);
    assert!(s.skipped_cells[0].reason.contains("insufficient local data"));
    let wide = qqr_surface(&y, &x, &no_controls(n), &grid, &KernelSpec { bandwidth: 0.2, ..Default::default() }).unwrap();
    assert!(wide.skipped_cells.is_empty());
}

#[test]
fn export_round_trip() {
    let n = 30;
    let x = uniform(n, 21);
    let y = &x * 2.0 + normal(n, 0.1, 22);
    let grid = QuantileGrid::new(vec![0.3, 0.7], vec![0.01, 0.6]).unwrap();
    let spec = KernelSpec { bandwidth: 0.1, ..Default::default() };
    let s = qqr_surface(&y, &x, &no_controls(n), &grid, &spec).unwrap();
    assert_eq!(s.fitted_count(), 2);
    let (mut csv, mut json) = (Vec::new(), Vec::new());
    export_surface(&s, &mut csv, &mut json).unwrap();
    let text = String::from_utf8(csv.clone()).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(1).unwrap().starts_with("0.3,0.01,,,"));
    assert!(text.lines().nth(1).unwrap().ends_with(",true"));
    let back = read_surface(csv.as_slice(), json.as_slice()).unwrap();
    assert_eq!(back, s.table());
}
