//! Sparse Gaussian graphical models.
//!
//! The precision matrix is estimated by maximizing
//! `log det Θ - tr(SΘ) - λ Σ_{i≠j} |Θ_ij|` with block coordinate descent over
//! the columns of the working covariance `W`: every column update is a lasso
//! problem in the remaining p-1 coordinates, solved by cyclic coordinate
//! descent with soft-thresholding. The diagonal is not penalized, so
//! `W_ii = S_ii` throughout.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::StandardizedDataset;
use crate::linalg::{spd_inverse, spd_log_det, symmetrize};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 1000;
/// Off-diagonal precision entries at or below this magnitude are not edges.
pub const EDGE_THRESHOLD: f64 = 1e-8;
pub const DEFAULT_GRID_LEN: usize = 30;
pub const DEFAULT_EBIC_GAMMA: f64 = 0.5;

const LASSO_TOL: f64 = 1e-13;
const LASSO_MAX_PASSES: usize = 100_000;

#[derive(Debug, Error)]
pub enum GlassoError {
    #[error("no convergence after {0} sweeps")]
    NotConverged(usize),
    #[error("covariance matrix is singular and the penalty is zero")]
    SingularInput,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maximum-likelihood covariance (divisor n) of a set of named variables.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    pub s: DMatrix<f64>,
    pub n: usize,
    pub codes: Vec<String>,
}

impl CovarianceMatrix {
    pub fn p(&self) -> usize {
        self.s.nrows()
    }

    /// Largest off-diagonal magnitude; any λ at or above it yields an empty graph.
    pub fn lambda_max(&self) -> f64 {
        let p = self.p();
        let mut m = 0.0_f64;
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    m = m.max(self.s[(i, j)].abs());
                }
            }
        }
        m
    }

    /// Square CSV with a leading `code` column.
    pub fn read_csv<R: Read>(input: R, n: usize) -> Result<Self, GlassoError> {
        let mut rdr = csv::Reader::from_reader(input);
        let codes: Vec<String> = rdr.headers()?.iter().skip(1).map(String::from).collect();
        let p = codes.len();
        let mut flat = Vec::with_capacity(p * p);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.get(0) != codes.get(i).map(String::as_str) {
                return Err(GlassoError::InvalidInput(format!(
                    "row {i} label does not match the header"
                )));
            }
            for cell in rec.iter().skip(1) {
                flat.push(cell.trim().parse::<f64>().map_err(|_| {
                    GlassoError::InvalidInput(format!("unparsable covariance entry `{cell}`"))
                })?);
            }
        }
        if flat.len() != p * p || p == 0 {
            return Err(GlassoError::InvalidInput("covariance matrix is not square".into()));
        }
        let s = DMatrix::from_row_slice(p, p, &flat);
        if (&s - s.transpose()).amax() > 1e-12 {
            return Err(GlassoError::InvalidInput("covariance matrix is not symmetric".into()));
        }
        Ok(Self { s, n, codes })
    }
}

/// `(1/n) XᵀX` of the column-centered matrix.
pub fn covariance_of(x: &DMatrix<f64>, codes: &[String]) -> CovarianceMatrix {
    let (n, p) = x.shape();
    let mut c = x.clone();
    for j in 0..p {
        let m = x.column(j).sum() / n as f64;
        c.column_mut(j).add_scalar_mut(-m);
    }
    let mut s = c.transpose() * &c / n as f64;
    symmetrize(&mut s);
    CovarianceMatrix {
        s,
        n,
        codes: codes.to_vec(),
    }
}

pub fn sample_covariance(d: &StandardizedDataset) -> Result<CovarianceMatrix, GlassoError> {
    if d.n() < 2 {
        return Err(GlassoError::InvalidInput("need at least two observations".into()));
    }
    Ok(covariance_of(d.matrix(), &d.codes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: String,
    pub j: String,
    pub partial_corr: f64,
}

#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    pub codes: Vec<String>,
    pub theta: DMatrix<f64>,
    /// Working covariance at termination.
    pub w: DMatrix<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub partial_corr: DMatrix<f64>,
    pub edges: Vec<Edge>,
    /// Penalized log-likelihood after every sweep.
    pub objective_trace: Vec<f64>,
}

impl PrecisionEstimate {
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Off-diagonal non-zero pattern (the diagonal is always set).
    pub fn support(&self) -> DMatrix<bool> {
        let p = self.theta.nrows();
        DMatrix::from_fn(p, p, |i, j| i == j || self.theta[(i, j)].abs() > EDGE_THRESHOLD)
    }

    pub fn edge(&self, a: &str, b: &str) -> Option<&Edge> {
        self.edges
            .iter()
            .find(|e| (e.i == a && e.j == b) || (e.i == b && e.j == a))
    }

    pub fn write_theta_csv<W: Write>(&self, out: W) -> Result<(), GlassoError> {
        write_matrix_csv(out, &self.codes, &self.theta)
    }

    pub fn write_partial_corr_csv<W: Write>(&self, out: W) -> Result<(), GlassoError> {
        write_matrix_csv(out, &self.codes, &self.partial_corr)
    }
}

fn write_matrix_csv<W: Write>(out: W, codes: &[String], m: &DMatrix<f64>) -> Result<(), GlassoError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["code".to_string()];
    header.extend(codes.iter().cloned());
    w.write_record(&header)?;
    for (i, code) in codes.iter().enumerate() {
        let mut rec = vec![code.clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Coordinate descent for min ½ βᵀAβ - bᵀβ + λ‖β‖₁, warm-started from `beta`.
fn lasso_cd(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64, beta: &mut DVector<f64>) {
    let m = b.len();
    let scale = b.amax().max(1e-300);
    for _ in 0..LASSO_MAX_PASSES {
        let mut max_delta = 0.0_f64;
        for k in 0..m {
            let mut r = b[k];
            for l in 0..m {
                if l != k {
                    r -= a[(k, l)] * beta[l];
                }
            }
            let new = soft_threshold(r, lambda) / a[(k, k)];
            max_delta = max_delta.max((new - beta[k]).abs());
            beta[k] = new;
        }
        if max_delta <= LASSO_TOL * scale {
            break;
        }
    }
}

fn drop_index(m: usize, j: usize) -> Vec<usize> {
    (0..m).filter(|&i| i != j).collect()
}

/// Penalized Gaussian log-likelihood `log det Θ - tr(SΘ) - λ Σ_{i≠j}|Θ_ij|`;
/// `-inf` when Θ is not positive definite.
pub fn penalized_objective(s: &DMatrix<f64>, theta: &DMatrix<f64>, lambda: f64) -> f64 {
    let Some(ld) = spd_log_det(theta) else {
        return f64::NEG_INFINITY;
    };
    let tr = (s.component_mul(theta)).sum();
    ld - tr - lambda * off_diagonal_l1(theta)
}

fn off_diagonal_l1(theta: &DMatrix<f64>) -> f64 {
    let p = theta.nrows();
    let mut l1 = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                l1 += theta[(i, j)].abs();
            }
        }
    }
    l1
}

fn theta_from_columns(w: &DMatrix<f64>, betas: &[DVector<f64>]) -> DMatrix<f64> {
    let p = w.nrows();
    let mut theta = DMatrix::zeros(p, p);
    for (j, beta) in betas.iter().enumerate() {
        let idx = drop_index(p, j);
        let w12 = DVector::from_iterator(p - 1, idx.iter().map(|&i| w[(i, j)]));
        let tjj = 1.0 / (w[(j, j)] - w12.dot(beta));
        theta[(j, j)] = tjj;
        for (pos, &i) in idx.iter().enumerate() {
            theta[(i, j)] = -beta[pos] * tjj;
        }
    }
    symmetrize(&mut theta);
    theta
}

/// Largest violation of the stationarity conditions `Θ⁻¹ - S - λΓ = 0`,
/// Γ a subgradient of the off-diagonal ℓ₁ norm.
pub fn kkt_residual(s: &DMatrix<f64>, theta: &DMatrix<f64>, lambda: f64) -> f64 {
    let Some(w) = spd_inverse(theta) else {
        return f64::INFINITY;
    };
    let p = s.nrows();
    let mut worst = 0.0_f64;
    for i in 0..p {
        for j in 0..p {
            let g = w[(i, j)] - s[(i, j)];
            let v = if i == j {
                g.abs()
            } else if theta[(i, j)].abs() > EDGE_THRESHOLD {
                (g - lambda * theta[(i, j)].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            };
            worst = worst.max(v);
        }
    }
    worst
}

/// `-Θ_ij / sqrt(Θ_ii Θ_jj)` off the diagonal, ones on it.
pub fn partial_correlations(theta: &DMatrix<f64>) -> DMatrix<f64> {
    let p = theta.nrows();
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            -theta[(i, j)] / (theta[(i, i)] * theta[(j, j)]).sqrt()
        }
    })
}

fn edges_of(codes: &[String], theta: &DMatrix<f64>, pc: &DMatrix<f64>) -> Vec<Edge> {
    let p = theta.nrows();
    let mut edges = Vec::new();
    for i in 0..p {
        for j in (i + 1)..p {
            if theta[(i, j)].abs() > EDGE_THRESHOLD {
                edges.push(Edge {
                    i: codes[i].clone(),
                    j: codes[j].clone(),
                    partial_corr: pc[(i, j)],
                });
            }
        }
    }
    edges
}

/// Graphical lasso fit at a single penalty level.
///
/// Sweeps stop once the mean absolute change of `W` over one sweep falls
/// below `tol` times the mean absolute off-diagonal entry of `S`.
pub fn glasso_fit(
    cov: &CovarianceMatrix,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PrecisionEstimate, GlassoError> {
    let s = &cov.s;
    let p = s.nrows();
    if p == 0 || s.ncols() != p || cov.codes.len() != p {
        return Err(GlassoError::InvalidInput("covariance must be square and labelled".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(GlassoError::InvalidInput(format!("penalty must be >= 0, got {lambda}")));
    }
    if (s - s.transpose()).amax() > 1e-10 * s.amax().max(1.0) {
        return Err(GlassoError::InvalidInput("covariance matrix is not symmetric".into()));
    }
    if (0..p).any(|i| !(s[(i, i)] > 0.0)) {
        return Err(GlassoError::SingularInput);
    }
    if lambda == 0.0 {
        let eig = s.clone().symmetric_eigen();
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
        if lo <= 1e-10 * hi {
            return Err(GlassoError::SingularInput);
        }
    }

    if p == 1 {
        let theta = DMatrix::from_element(1, 1, 1.0 / s[(0, 0)]);
        return Ok(finish(cov, theta, s.clone(), lambda, 0, Vec::new()));
    }

    let off_mean = {
        let total: f64 = (0..p)
            .flat_map(|i| (0..p).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| s[(i, j)].abs())
            .sum();
        total / (p * (p - 1)) as f64
    };
    let threshold = tol * off_mean.max(f64::MIN_POSITIVE);

    // Blend of S and diag(S): positive definite and inside the box
    // |W_ij - S_ij| <= λ, which the block updates then preserve.
    let off_max = (0..p)
        .flat_map(|i| (0..p).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .fold(0.0_f64, |m, (i, j)| m.max(s[(i, j)].abs()));
    let t = if off_max > 0.0 { (lambda / off_max).min(1.0) } else { 1.0 };
    let mut w = s * (1.0 - t) + DMatrix::from_diagonal(&s.diagonal()) * t;
    let mut betas: Vec<DVector<f64>> = vec![DVector::zeros(p - 1); p];
    let mut trace = Vec::new();
    for sweep in 1..=max_iter {
        let w_old = w.clone();
        for j in 0..p {
            let idx = drop_index(p, j);
            let w11 = w.select_rows(&idx).select_columns(&idx);
            let s12 = DVector::from_iterator(p - 1, idx.iter().map(|&i| s[(i, j)]));
            lasso_cd(&w11, &s12, lambda, &mut betas[j]);
            let w12 = &w11 * &betas[j];
            for (pos, &i) in idx.iter().enumerate() {
                w[(i, j)] = w12[pos];
                w[(j, i)] = w12[pos];
            }
        }
        let theta = theta_from_columns(&w, &betas);
        trace.push(penalized_objective(s, &theta, lambda));
        let change = (&w - &w_old).abs().sum() / (p * (p - 1)) as f64;
        if change < threshold {
            return Ok(finish(cov, theta, w, lambda, sweep, trace));
        }
    }
    Err(GlassoError::NotConverged(max_iter))
}

fn finish(
    cov: &CovarianceMatrix,
    theta: DMatrix<f64>,
    w: DMatrix<f64>,
    lambda: f64,
    iterations: usize,
    objective_trace: Vec<f64>,
) -> PrecisionEstimate {
    let partial_corr = partial_correlations(&theta);
    let edges = edges_of(&cov.codes, &theta, &partial_corr);
    PrecisionEstimate {
        codes: cov.codes.clone(),
        kkt_residual: kkt_residual(&cov.s, &theta, lambda),
        theta,
        w,
        lambda,
        iterations,
        partial_corr,
        edges,
        objective_trace,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Criterion {
    Bic,
    Ebic { gamma: f64 },
}

impl Criterion {
    /// `-2 loglik + |E| log n`, plus `4 γ |E| log p` for EBIC, with
    /// `loglik = (n/2)(log det Θ - tr(SΘ))` evaluated at `theta`.
    pub fn score_at(&self, cov: &CovarianceMatrix, theta: &DMatrix<f64>, edges: usize) -> f64 {
        let n = cov.n as f64;
        let loglik = 0.5 * n * penalized_objective(&cov.s, theta, 0.0);
        let e = edges as f64;
        let bic = -2.0 * loglik + e * n.ln();
        match self {
            Criterion::Bic => bic,
            Criterion::Ebic { gamma } => bic + 4.0 * gamma * e * (cov.p() as f64).ln(),
        }
    }

    /// Score of the graph selected by `est`, with the likelihood evaluated at
    /// the maximum-likelihood precision matrix restricted to that graph.
    pub fn score(
        &self,
        cov: &CovarianceMatrix,
        est: &PrecisionEstimate,
        tol: f64,
        max_iter: usize,
    ) -> Result<f64, GlassoError> {
        let theta = support_mle(cov, &est.support(), tol, max_iter)?;
        Ok(self.score_at(cov, &theta, est.edge_count()))
    }
}

/// Maximum-likelihood precision matrix with `Θ_ij = 0` wherever
/// `support[(i, j)]` is false (i ≠ j). Same column sweeps as [`glasso_fit`],
/// with each column regression restricted to the allowed neighbours.
pub fn support_mle(
    cov: &CovarianceMatrix,
    support: &DMatrix<bool>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>, GlassoError> {
    let s = &cov.s;
    let p = s.nrows();
    if p == 1 {
        return Ok(DMatrix::from_element(1, 1, 1.0 / s[(0, 0)]));
    }
    let scale = s.diagonal().mean();
    let mut w = s.clone();
    let mut betas: Vec<DVector<f64>> = vec![DVector::zeros(p - 1); p];
    for _ in 0..max_iter {
        let w_old = w.clone();
        for j in 0..p {
            let idx = drop_index(p, j);
            let active: Vec<usize> = (0..p - 1).filter(|&k| support[(idx[k], j)]).collect();
            let w11 = w.select_rows(&idx).select_columns(&idx);
            let mut beta = DVector::zeros(p - 1);
            if !active.is_empty() {
                let a = w11.select_rows(&active).select_columns(&active);
                let b = DVector::from_iterator(active.len(), active.iter().map(|&k| s[(idx[k], j)]));
                let sol = a.cholesky().ok_or(GlassoError::SingularInput)?.solve(&b);
                for (pos, &k) in active.iter().enumerate() {
                    beta[k] = sol[pos];
                }
            }
            let w12 = &w11 * &beta;
            for (pos, &i) in idx.iter().enumerate() {
                w[(i, j)] = w12[pos];
                w[(j, i)] = w12[pos];
            }
            betas[j] = beta;
        }
        if (&w - &w_old).amax() <= tol * 1e-3 * scale {
            let theta = theta_from_columns(&w, &betas);
            return if theta.clone().cholesky().is_some() {
                Ok(theta)
            } else {
                Err(GlassoError::SingularInput)
            };
        }
    }
    Err(GlassoError::NotConverged(max_iter))
}

#[derive(Debug, Clone)]
pub struct PenaltySelection {
    pub grid: Vec<f64>,
    pub criterion: Criterion,
    pub scores: Vec<f64>,
    pub chosen: f64,
    pub fits: Vec<PrecisionEstimate>,
}

impl PenaltySelection {
    pub fn chosen_fit(&self) -> &PrecisionEstimate {
        let i = self.grid.iter().position(|&l| l == self.chosen).expect("chosen in grid");
        &self.fits[i]
    }
}

/// `len` log-spaced penalties from `0.01 λ_max` to `λ_max`, increasing.
pub fn default_grid(cov: &CovarianceMatrix, len: usize) -> Vec<f64> {
    let hi = cov.lambda_max();
    log_grid(0.01 * hi, hi, len)
}

pub fn log_grid(lo: f64, hi: f64, len: usize) -> Vec<f64> {
    match len {
        0 => Vec::new(),
        1 => vec![hi],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..len)
                .map(|i| {
                    if i == len - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (len - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Fit every grid point and keep the one with the smallest criterion value,
/// preferring the larger penalty on ties. Each graph is scored at its
/// support-restricted maximum-likelihood estimate, so the shrinkage of the
/// penalized fit does not favour denser graphs.
pub fn select_lambda(
    cov: &CovarianceMatrix,
    grid: &[f64],
    criterion: Criterion,
    tol: f64,
    max_iter: usize,
) -> Result<PenaltySelection, GlassoError> {
    if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(GlassoError::InvalidInput("penalty grid must be non-empty and >= 0".into()));
    }
    let fits = grid
        .par_iter()
        .map(|&l| glasso_fit(cov, l, tol, max_iter))
        .collect::<Result<Vec<_>, _>>()?;
    let scores = fits
        .par_iter()
        .map(|f| criterion.score(cov, f, tol, max_iter))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = 0;
    for i in 1..grid.len() {
        let better = scores[i] < scores[best] || (scores[i] == scores[best] && grid[i] > grid[best]);
        if better {
            best = i;
        }
    }
    Ok(PenaltySelection {
        grid: grid.to_vec(),
        criterion,
        scores,
        chosen: grid[best],
        fits,
    })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

fn sign_label(v: f64) -> &'static str {
    if v >= 0.0 {
        "positive"
    } else {
        "negative"
    }
}

/// Undirected GraphML: one node per variable (`code` attribute), one edge per
/// non-zero partial correlation (`weight`, `sign`).
pub fn write_graphml<W: Write>(est: &PrecisionEstimate, mut out: W) -> Result<(), GlassoError> {
    writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#)?;
    writeln!(out, r#"<graphml xmlns="http://graphml.graphdrawing.org/xmlns">"#)?;
    writeln!(out, r#"  <key id="code" for="node" attr.name="code" attr.type="string"/>"#)?;
    writeln!(out, r#"  <key id="weight" for="edge" attr.name="weight" attr.type="double"/>"#)?;
    writeln!(out, r#"  <key id="sign" for="edge" attr.name="sign" attr.type="string"/>"#)?;
    writeln!(out, r#"  <graph id="G" edgedefault="undirected">"#)?;
    for (i, code) in est.codes.iter().enumerate() {
        writeln!(
            out,
            r#"    <node id="n{i}"><data key="code">{}</data></node>"#,
            xml_escape(code)
        )?;
    }
    let pos = |c: &str| est.codes.iter().position(|x| x == c).expect("edge endpoint is a node");
    for (k, e) in est.edges.iter().enumerate() {
        writeln!(
            out,
            r#"    <edge id="e{k}" source="n{}" target="n{}"><data key="weight">{}</data><data key="sign">{}</data></edge>"#,
            pos(&e.i),
            pos(&e.j),
            e.partial_corr,
            sign_label(e.partial_corr)
        )?;
    }
    writeln!(out, "  </graph>")?;
    writeln!(out, "</graphml>")?;
    Ok(())
}

pub fn write_edge_list<W: Write>(edges: &[Edge], out: W) -> Result<(), GlassoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["i", "j", "partial_corr"])?;
    for e in edges {
        w.write_record([e.i.clone(), e.j.clone(), e.partial_corr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_edge_list<R: Read>(input: R) -> Result<Vec<Edge>, GlassoError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut edges = Vec::new();
    for rec in rdr.deserialize() {
        edges.push(rec?);
    }
    Ok(edges)
}

/// Per-λ criterion values as CSV (`lambda,score,edges,chosen`).
pub fn write_selection_csv<W: Write>(sel: &PenaltySelection, out: W) -> Result<(), GlassoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "score", "edges", "chosen"])?;
    for ((l, s), f) in sel.grid.iter().zip(&sel.scores).zip(&sel.fits) {
        w.write_record([
            l.to_string(),
            s.to_string(),
            f.edge_count().to_string(),
            (*l == sel.chosen).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("v{i}")).collect()
    }

    fn cov(s: DMatrix<f64>) -> CovarianceMatrix {
        let p = s.nrows();
        CovarianceMatrix { s, n: 100, codes: codes(p) }
    }

    fn spd4() -> DMatrix<f64> {
        DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.5, 0.2, 0.1, //
                0.5, 1.0, 0.3, -0.2, //
                0.2, 0.3, 1.0, 0.4, //
                0.1, -0.2, 0.4, 1.0,
            ],
        )
    }

    #[test]
    fn zero_penalty_inverts() {
        let c = cov(spd4());
        let est = glasso_fit(&c, 0.0, 1e-8, 1000).unwrap();
        let inv = c.s.clone().try_inverse().unwrap();
        assert!((&est.theta - inv).amax() < 1e-6);
    }

    #[test]
    fn full_shrinkage_gives_diagonal() {
        let mut s = spd4();
        s[(0, 0)] = 2.0;
        let c = cov(s);
        let est = glasso_fit(&c, c.lambda_max(), 1e-6, 1000).unwrap();
        assert_eq!(est.edge_count(), 0);
        assert!((est.theta[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((est.theta[(3, 3)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_input_at_zero_penalty() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 1.0, 0.0, 0.5, 0.0, 1.0]);
        let c = covariance_of(&x, &codes(3));
        assert!(matches!(glasso_fit(&c, 0.0, 1e-6, 100), Err(GlassoError::SingularInput)));
        // a positive penalty makes the problem well posed
        assert!(glasso_fit(&c, 0.05, 1e-6, 1000).is_ok());
    }

    #[test]
    fn max_iter_is_enforced() {
        let c = cov(spd4());
        assert!(matches!(glasso_fit(&c, 0.01, 1e-15, 1), Err(GlassoError::NotConverged(1))));
    }

    #[test]
    fn scalar_covariance() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 6.0]);
        let c = covariance_of(&x, &codes(1));
        assert!((c.s[(0, 0)] - 3.5).abs() < 1e-15);
        let est = glasso_fit(&c, 0.0, 1e-6, 10).unwrap();
        assert!((est.theta[(0, 0)] - 1.0 / 3.5).abs() < 1e-15);
    }

    #[test]
    fn diagonal_theta_has_zero_partial_correlations() {
        let pc = partial_correlations(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])));
        assert_eq!(pc, DMatrix::identity(3, 3));
    }

    #[test]
    fn singleton_grid_is_chosen() {
        let c = cov(spd4());
        let sel = select_lambda(&c, &[0.1], Criterion::Bic, 1e-6, 1000).unwrap();
        assert_eq!(sel.chosen, 0.1);
        assert!(select_lambda(&c, &[], Criterion::Bic, 1e-6, 1000).is_err());
    }

    #[test]
    fn grid_is_log_spaced() {
        let c = cov(spd4());
        let g = default_grid(&c, 30);
        assert_eq!(g.len(), 30);
        assert_eq!(g[29], 0.5);
        assert!((g[0] - 0.005).abs() < 1e-15);
        let ratios: Vec<f64> = g.windows(2).map(|w| w[1] / w[0]).collect();
        assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 1e-12));
    }

    #[test]
    fn graphml_and_edge_list() {
        let mut theta = DMatrix::identity(3, 3);
        theta[(0, 2)] = -0.3;
        theta[(2, 0)] = -0.3;
        let c = cov(DMatrix::identity(3, 3));
        let est = finish(&c, theta, DMatrix::identity(3, 3), 0.1, 1, vec![]);
        assert_eq!(est.edges.len(), 1);
        assert_eq!(est.edges[0].i, "v0");
        assert_eq!(est.edges[0].j, "v2");
        assert!((est.edges[0].partial_corr - 0.3).abs() < 1e-15);
        let mut g = Vec::new();
        write_graphml(&est, &mut g).unwrap();
        let g = String::from_utf8(g).unwrap();
        assert_eq!(g.matches("<node ").count(), 3);
        assert_eq!(g.matches("<edge ").count(), 1);
        assert!(g.contains(r#"source="n0" target="n2""#));
        assert!(g.contains(r#"<data key="sign">positive</data>"#));
        let mut buf = Vec::new();
        write_edge_list(&est.edges, &mut buf).unwrap();
        assert_eq!(read_edge_list(&buf[..]).unwrap(), est.edges);
    }
}
