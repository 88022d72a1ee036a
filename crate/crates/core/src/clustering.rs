//! Country clustering: k-means with k-means++ seeding, Ward agglomerative
//! clustering, silhouette and elbow scans, and a two-component PCA projection.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::StandardizedDataset;

/// Lloyd iteration cap.
pub const MAX_LLOYD_ITERATIONS: usize = 100;
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Error)]
pub enum ClusteringError {
    #[error("k = {k} is invalid for n = {n} (need 2 <= k < n)")]
    InvalidK { k: usize, n: usize },
    #[error("an empty cluster could not be re-seeded (fewer than k distinct points)")]
    EmptyClusterUnrecoverable,
    #[error("every cluster must be non-empty and there must be at least two")]
    InvalidAssignments,
    #[error("second singular value is numerically zero")]
    DegenerateSpectrum,
    #[error("need at least {needed} {what}")]
    TooSmall { what: &'static str, needed: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "kmeans")]
    KMeans,
    Ward,
}

#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub k: usize,
    /// Zero-based labels, one per row. Exported as 1..=k.
    pub labels: Vec<usize>,
    pub centroids: DMatrix<f64>,
    pub wss: f64,
    pub silhouette_mean: f64,
    /// Within-cluster sum of squares for every scanned k.
    pub wss_path: Vec<(usize, f64)>,
    /// Objective after every Lloyd update of the winning restart (k-means only).
    pub wss_trace: Vec<f64>,
}

fn sq_dist(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn row_dist2(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, j: usize) -> f64 {
    sq_dist(x.row(i).iter().copied(), c.row(j).iter().copied())
}

/// Mean of the rows carrying each label.
pub fn centroids_of(x: &DMatrix<f64>, labels: &[usize], k: usize) -> DMatrix<f64> {
    let p = x.ncols();
    let mut sums = DMatrix::zeros(k, p);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        let mut row = sums.row_mut(l);
        row += x.row(i);
    }
    for (l, &c) in counts.iter().enumerate() {
        if c > 0 {
            sums.row_mut(l).scale_mut(1.0 / c as f64);
        }
    }
    sums
}

/// Total within-cluster sum of squares around the label means.
pub fn within_ss(x: &DMatrix<f64>, labels: &[usize], k: usize) -> f64 {
    let c = centroids_of(x, labels, k);
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| row_dist2(x, i, &c, l))
        .sum()
}

fn nearest(x: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centers.nrows() {
        let d = row_dist2(x, i, centers, j);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp_seed(x: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = x.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(x.row(i).iter().copied(), x.row(chosen[0]).iter().copied()))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i).iter().copied(), x.row(next).iter().copied()));
        }
    }
    x.select_rows(&chosen)
}

struct LloydRun {
    labels: Vec<usize>,
    wss: f64,
    trace: Vec<f64>,
}

fn lloyd(x: &DMatrix<f64>, k: usize, mut centers: DMatrix<f64>) -> Result<LloydRun, ClusteringError> {
    let n = x.nrows();
    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let (l, _) = nearest(x, i, &centers);
            if *label != l {
                *label = l;
                changed = true;
            }
        }
        // re-seed empty clusters at the point farthest from its nearest centroid
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        let mut reseeded = false;
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for empty in empties {
            let (far, dist) = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .map(|i| (i, row_dist2(x, i, &centers, labels[i])))
                .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if far == usize::MAX || dist <= 0.0 {
                return Err(ClusteringError::EmptyClusterUnrecoverable);
            }
            counts[labels[far]] -= 1;
            counts[empty] += 1;
            labels[far] = empty;
            reseeded = true;
        }
        centers = centroids_of(x, &labels, k);
        let wss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| row_dist2(x, i, &centers, l))
            .sum();
        trace.push(wss);
        if !changed && !reseeded {
            break;
        }
    }
    let wss = *trace.last().expect("at least one iteration");
    Ok(LloydRun {
        labels,
        wss,
        trace,
    })
}

fn check_k(k: usize, n: usize) -> Result<(), ClusteringError> {
    if k < 2 || k > n {
        return Err(ClusteringError::InvalidK { k, n });
    }
    Ok(())
}

/// Best of `restarts` k-means++ initializations by within-cluster sum of
/// squares; ties go to the lowest restart index.
pub fn kmeans_matrix(
    x: &DMatrix<f64>,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterResult, ClusteringError> {
    check_k(k, x.nrows())?;
    let runs: Vec<Result<LloydRun, ClusteringError>> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
            let init = kmeans_pp_seed(x, k, &mut rng);
            lloyd(x, k, init)
        })
        .collect();
    let mut best: Option<LloydRun> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.wss < b.wss) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let labels = canonical_labels(&best.labels);
    let centroids = centroids_of(x, &labels, k);
    let silhouette_mean = if k < x.nrows() {
        silhouette_matrix(x, &labels)?
    } else {
        0.0
    };
    Ok(ClusterResult {
        k,
        wss_path: vec![(k, best.wss)],
        wss: best.wss,
        labels,
        centroids,
        silhouette_mean,
        wss_trace: best.trace,
    })
}

pub fn kmeans(
    d: &StandardizedDataset,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterResult, ClusteringError> {
    kmeans_matrix(d.matrix(), k, seed, restarts)
}

/// Relabel so that labels appear in order of first occurrence.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// One agglomeration step: clusters `a` and `b` (indices into the current
/// cluster list, a < b) merged at Ward cost `cost`.
#[derive(Debug, Clone, PartialEq)]
pub struct Merge {
    pub members: (Vec<usize>, Vec<usize>),
    pub cost: f64,
}

/// Ward merge sequence down to `k_stop` clusters, with the Lance-Williams
/// update on the increase in within-cluster sum of squares.
pub fn ward_merges(x: &DMatrix<f64>, k_stop: usize) -> (Vec<Merge>, Vec<Vec<usize>>) {
    let n = x.nrows();
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    // cost[i][j] = increase in WSS when merging clusters i and j
    let mut cost = DMatrix::from_fn(n, n, |i, j| {
        0.5 * sq_dist(x.row(i).iter().copied(), x.row(j).iter().copied())
    });
    let mut merges = Vec::with_capacity(n.saturating_sub(k_stop));
    let mut alive = n;
    while alive > k_stop {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in (i + 1)..n {
                if members[j].is_some() && cost[(i, j)] < best.2 {
                    best = (i, j, cost[(i, j)]);
                }
            }
        }
        let (a, b, c) = best;
        let ma = members[a].take().expect("alive");
        let mb = members[b].take().expect("alive");
        let (na, nb) = (ma.len() as f64, mb.len() as f64);
        for m in 0..n {
            if let Some(mm) = &members[m] {
                let nm = mm.len() as f64;
                let updated = ((na + nm) * cost[(a, m)] + (nb + nm) * cost[(b, m)] - nm * c)
                    / (na + nb + nm);
                cost[(a, m)] = updated;
                cost[(m, a)] = updated;
            }
        }
        let mut merged = ma.clone();
        merged.extend(&mb);
        merged.sort_unstable();
        merges.push(Merge {
            members: (ma, mb),
            cost: c,
        });
        members[a] = Some(merged);
        alive -= 1;
    }
    let clusters = members.into_iter().flatten().collect();
    (merges, clusters)
}

fn labels_from_clusters(n: usize, clusters: &[Vec<usize>]) -> Vec<usize> {
    let mut labels = vec![0; n];
    for (l, c) in clusters.iter().enumerate() {
        for &i in c {
            labels[i] = l;
        }
    }
    canonical_labels(&labels)
}

/// Ward hierarchical clustering cut at `k` clusters.
pub fn ward_matrix(x: &DMatrix<f64>, k: usize) -> Result<ClusterResult, ClusteringError> {
    let n = x.nrows();
    if k < 2 || k >= n {
        return Err(ClusteringError::InvalidK { k, n });
    }
    let (_, clusters) = ward_merges(x, k);
    let labels = labels_from_clusters(n, &clusters);
    let wss = within_ss(x, &labels, k);
    Ok(ClusterResult {
        k,
        centroids: centroids_of(x, &labels, k),
        silhouette_mean: silhouette_matrix(x, &labels)?,
        labels,
        wss,
        wss_path: vec![(k, wss)],
        wss_trace: Vec::new(),
    })
}

pub fn ward_hierarchical(d: &StandardizedDataset, k: usize) -> Result<ClusterResult, ClusteringError> {
    ward_matrix(d.matrix(), k)
}

/// Mean silhouette width, Euclidean metric. Singletons score 0.
pub fn silhouette_matrix(x: &DMatrix<f64>, labels: &[usize]) -> Result<f64, ClusteringError> {
    let n = x.nrows();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if k < 2 || labels.len() != n || counts.contains(&0) {
        return Err(ClusteringError::InvalidAssignments);
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            if counts[labels[i]] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] +=
                        sq_dist(x.row(i).iter().copied(), x.row(j).iter().copied()).sqrt();
                }
            }
            let own = labels[i];
            let a = sums[own] / (counts[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / n as f64)
}

pub fn silhouette(d: &StandardizedDataset, labels: &[usize]) -> Result<f64, ClusteringError> {
    silhouette_matrix(d.matrix(), labels)
}

/// Results for every k in `ks` plus the k with the largest mean silhouette
/// (ties to the smaller k).
#[derive(Debug, Clone)]
pub struct ElbowScan {
    pub method: Method,
    pub results: Vec<ClusterResult>,
    pub chosen_k: usize,
}

impl ElbowScan {
    pub fn chosen(&self) -> &ClusterResult {
        self.results
            .iter()
            .find(|r| r.k == self.chosen_k)
            .expect("chosen k was scanned")
    }

    pub fn wss_path(&self) -> Vec<(usize, f64)> {
        self.results.iter().map(|r| (r.k, r.wss)).collect()
    }

    pub fn silhouettes(&self) -> Vec<(usize, f64)> {
        self.results.iter().map(|r| (r.k, r.silhouette_mean)).collect()
    }
}

pub fn elbow_scan(
    x: &DMatrix<f64>,
    ks: &[usize],
    method: Method,
    seed: u64,
    restarts: usize,
) -> Result<ElbowScan, ClusteringError> {
    let mut results = Vec::with_capacity(ks.len());
    for &k in ks {
        results.push(match method {
            Method::KMeans => kmeans_matrix(x, k, seed, restarts)?,
            Method::Ward => ward_matrix(x, k)?,
        });
    }
    if results.is_empty() {
        return Err(ClusteringError::TooSmall {
            what: "values of k in the scan",
            needed: 1,
        });
    }
    let path: Vec<(usize, f64)> = results.iter().map(|r| (r.k, r.wss)).collect();
    for r in &mut results {
        r.wss_path = path.clone();
    }
    let chosen_k = results
        .iter()
        .fold(None::<&ClusterResult>, |best, r| match best {
            Some(b) if b.silhouette_mean >= r.silhouette_mean => Some(b),
            _ => Some(r),
        })
        .map(|r| r.k)
        .expect("non-empty");
    Ok(ElbowScan {
        method,
        results,
        chosen_k,
    })
}

#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// n x 2
    pub scores: DMatrix<f64>,
    /// p x 2, orthonormal columns
    pub loadings: DMatrix<f64>,
    pub variance_explained: [f64; 2],
}

/// First two principal directions of the column-centered matrix. Each
/// loading vector is signed so its largest-magnitude entry is positive.
pub fn pca2_matrix(x: &DMatrix<f64>) -> Result<PcaProjection, ClusteringError> {
    let (n, p) = x.shape();
    if p < 2 {
        return Err(ClusteringError::TooSmall { what: "columns", needed: 2 });
    }
    if n < 3 {
        return Err(ClusteringError::TooSmall { what: "rows", needed: 3 });
    }
    let mut centered = x.clone();
    for j in 0..p {
        let mean = x.column(j).sum() / n as f64;
        centered.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    if order.len() < 2 || svd.singular_values[order[1]] < 1e-12 {
        return Err(ClusteringError::DegenerateSpectrum);
    }
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut loadings = DMatrix::zeros(p, 2);
    let mut variance_explained = [0.0; 2];
    for (c, &idx) in order.iter().take(2).enumerate() {
        let mut v: DVector<f64> = v_t.row(idx).transpose();
        let lead = v.iter().fold(0.0_f64, |m, &e| if e.abs() > m.abs() { e } else { m });
        if lead < 0.0 {
            v.neg_mut();
        }
        loadings.set_column(c, &v);
        variance_explained[c] = svd.singular_values[idx].powi(2) / total;
    }
    Ok(PcaProjection {
        scores: centered * &loadings,
        loadings,
        variance_explained,
    })
}

pub fn pca2(d: &StandardizedDataset) -> Result<PcaProjection, ClusteringError> {
    pca2_matrix(d.matrix())
}

/// Adjusted Rand index between two partitions of the same rows.
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |m: u64| (m * m.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&m| c2(m)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let expected = rows * cols / c2(n as u64);
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < f64::EPSILON {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}

/// Row ids, labels and projections needed to redraw the clustering figures.
pub struct ClusteringExport<'a> {
    pub row_ids: &'a [String],
    pub codes: &'a [String],
    pub result: &'a ClusterResult,
    pub silhouettes: &'a [(usize, f64)],
    pub pca: &'a PcaProjection,
}

impl ClusteringExport<'_> {
    pub fn write_assignments<W: Write>(&self, out: W, id_column: &str) -> Result<(), ClusteringError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([id_column, "cluster"])?;
        for (id, l) in self.row_ids.iter().zip(&self.result.labels) {
            w.write_record([id.clone(), (l + 1).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-cluster feature means (the radar-chart table).
    pub fn write_centroids<W: Write>(&self, out: W) -> Result<(), ClusteringError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["cluster".to_string()];
        header.extend(self.codes.iter().cloned());
        w.write_record(&header)?;
        for (l, row) in self.result.centroids.row_iter().enumerate() {
            let mut rec = vec![(l + 1).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_pca_scores<W: Write>(&self, out: W, id_column: &str) -> Result<(), ClusteringError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([id_column, "pc1", "pc2"])?;
        for (i, id) in self.row_ids.iter().enumerate() {
            w.write_record([
                id.clone(),
                self.pca.scores[(i, 0)].to_string(),
                self.pca.scores[(i, 1)].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_wss_path<W: Write>(&self, out: W) -> Result<(), ClusteringError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "wss", "silhouette"])?;
        for &(k, wss) in &self.result.wss_path {
            let sil = self
                .silhouettes
                .iter()
                .find(|(kk, _)| *kk == k)
                .map(|(_, s)| s.to_string())
                .unwrap_or_default();
            w.write_record([k.to_string(), wss.to_string(), sil])?;
        }
        w.flush()?;
        Ok(())
    }
}
