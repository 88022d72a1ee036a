use nalgebra::DMatrix;
use proptest::prelude::*;
use qqnet::clustering::{
    adjusted_rand, elbow_scan, kmeans_matrix, pca2_matrix, silhouette_matrix, ward_matrix, ward_merges, within_ss,
    Method,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
}

/// Two unit-variance blobs whose centers are 10 apart.
fn two_blobs(per: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
    let mut x = gaussian(2 * per, 3, seed);
    for i in per..2 * per {
        x[(i, 0)] += 10.0;
    }
    let truth = (0..2 * per).map(|i| (i >= per) as usize).collect();
    (x, truth)
}

fn cluster_wss(x: &DMatrix<f64>, rows: &[usize]) -> f64 {
    let sub = x.select_rows(rows);
    let mean = sub.row_mean();
    (0..sub.nrows()).map(|i| (sub.row(i) - &mean).norm_squared()).sum()
}

#[test]
fn ward_matches_brute_force_merges() {
    let x = gaussian(20, 3, 1);
    let (merges, _) = ward_merges(&x, 1);
    let mut clusters: Vec<Vec<usize>> = (0..20).map(|i| vec![i]).collect();
    for m in &merges {
        let mut best = (0, 0, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let mut joined = clusters[a].clone();
                joined.extend(&clusters[b]);
                let delta = cluster_wss(&x, &joined) - cluster_wss(&x, &clusters[a]) - cluster_wss(&x, &clusters[b]);
                if delta < best.2 {
                    best = (a, b, delta);
                }
            }
        }
        let (a, b, delta) = best;
        assert!((m.cost - delta).abs() < 1e-9, "{} vs {delta}", m.cost);
        let mut got = [m.members.0.clone(), m.members.1.clone()];
        let mut want = [clusters[a].clone(), clusters[b].clone()];
        for v in got.iter_mut().chain(want.iter_mut()) {
            v.sort_unstable();
        }
        got.sort();
        want.sort();
        assert_eq!(got, want);
        let mut joined = clusters[a].clone();
        joined.extend(&clusters[b]);
        clusters.remove(b);
        clusters[a] = joined;
    }
    // Ward costs are non-decreasing
    for w in merges.windows(2) {
        assert!(w[1].cost >= w[0].cost - 1e-12);
    }
}

#[test]
fn separated_blobs_recovered_by_both_methods() {
    for seed in 0..5 {
        let (x, truth) = two_blobs(25, 10 + seed);
        let km = kmeans_matrix(&x, 2, seed, 10).unwrap();
        let wd = ward_matrix(&x, 2).unwrap();
        assert_eq!(adjusted_rand(&km.labels, &truth), 1.0);
        assert_eq!(adjusted_rand(&wd.labels, &truth), 1.0);
        for w in km.wss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        for method in [Method::KMeans, Method::Ward] {
            let scan = elbow_scan(&x, &(2..=8).collect::<Vec<_>>(), method, seed, 10).unwrap();
            assert_eq!(scan.chosen_k, 2);
            let path = scan.wss_path();
            assert_eq!(path.len(), 7);
        }
    }
}

#[test]
fn kmeans_beats_random_partitions() {
    let x = gaussian(60, 4, 2);
    let fit = kmeans_matrix(&x, 4, 7, 10).unwrap();
    assert!((within_ss(&x, &fit.labels, 4) - fit.wss).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let labels: Vec<usize> = (0..60).map(|i| if i < 4 { i } else { rng.random_range(0..4) }).collect();
        assert!(fit.wss <= within_ss(&x, &labels, 4) + 1e-12);
    }
}

#[test]
fn kmeans_is_deterministic_for_a_seed() {
    let x = gaussian(50, 3, 4);
    let a = kmeans_matrix(&x, 3, 99, 10).unwrap();
    let b = kmeans_matrix(&x, 3, 99, 10).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.wss, b.wss);
}

#[test]
fn silhouette_of_random_labels_is_near_zero() {
    let x = gaussian(200, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
    let s = silhouette_matrix(&x, &labels).unwrap();
    assert!(s.abs() < 0.1, "{s}");
}

#[test]
fn silhouette_invariant_under_isometry() {
    let x = gaussian(40, 3, 7);
    let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
    let q = gaussian(3, 3, 8).qr().q();
    let moved = (&x * q).add_scalar(5.0);
    let (a, b) = (silhouette_matrix(&x, &labels).unwrap(), silhouette_matrix(&moved, &labels).unwrap());
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn pca_reconstructs_rank_two_data() {
    let scores = gaussian(30, 2, 9);
    let basis = gaussian(5, 2, 10).qr().q();
    let x = &scores * basis.transpose();
    let p = pca2_matrix(&x).unwrap();
    assert!((p.variance_explained[0] + p.variance_explained[1] - 1.0).abs() < 1e-12);
    let mut centered = x.clone();
    for j in 0..5 {
        let m = x.column(j).mean();
        centered.column_mut(j).add_scalar_mut(-m);
    }
    assert!((&p.scores * p.loadings.transpose() - centered).amax() < 1e-10);
    assert!((p.loadings.transpose() * &p.loadings - DMatrix::identity(2, 2)).amax() < 1e-12);
}

#[test]
fn pca_on_isotropic_noise_splits_variance_evenly() {
    let x = gaussian(5000, 4, 11);
    let p = pca2_matrix(&x).unwrap();
    for v in p.variance_explained {
        assert!((v - 0.25).abs() < 0.03, "{v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn silhouette_within_bounds(seed in 0u64..1000, k in 2usize..6) {
        let x = gaussian(30, 2, seed);
        let fit = kmeans_matrix(&x, k, seed, 3).unwrap();
        prop_assert!(fit.silhouette_mean >= -1.0 && fit.silhouette_mean <= 1.0);
        prop_assert_eq!(fit.labels.iter().max().copied(), Some(k - 1));
        prop_assert_eq!(fit.centroids.nrows(), k);
    }

    #[test]
    fn ward_partition_is_complete(seed in 0u64..1000, k in 2usize..8) {
        let x = gaussian(25, 3, seed);
        let fit = ward_matrix(&x, k).unwrap();
        let mut seen = vec![false; k];
        for &l in &fit.labels {
            seen[l] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
    }
}
