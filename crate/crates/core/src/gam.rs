//! Additive models with penalized cubic regression splines (identity link).
//!
//! Each smooth is a natural cubic spline parametrized by its values at `k`
//! knots placed at quantiles of the predictor. The wiggliness penalty is the
//! exact integrated squared second derivative. Smooths are centered over the
//! sample by absorbing a sum-to-zero constraint into the basis, and smoothing
//! parameters are chosen by coordinate-wise grid search on GCV.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, StandardizedDataset};
use crate::linalg::RANK_TOL;

pub const DEFAULT_NUM_BASIS: usize = 10;

#[derive(Debug, Error)]
pub enum GamError {
    #[error("`{code}` has {distinct} distinct values, need at least {needed}")]
    TooFewDistinctValues {
        code: String,
        distinct: usize,
        needed: usize,
    },
    #[error("basis dimension must be at least 4, got {0}")]
    BasisTooSmall(usize),
    #[error("penalized least-squares system is ill conditioned")]
    IllConditionedSystem,
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cubic regression spline basis for one predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub code: String,
    /// All knots, boundary knots included, strictly increasing.
    pub knots: Vec<f64>,
    pub num_basis: usize,
    /// ∫ f''(x)² dx = βᵀ P β for f with knot values β.
    #[serde(skip)]
    pub penalty: DMatrix<f64>,
    /// Maps knot values to second derivatives at the knots.
    #[serde(skip)]
    second_deriv: DMatrix<f64>,
}

fn place_knots(x: &[f64], k: usize) -> Vec<f64> {
    let mut u: Vec<f64> = x.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let m = u.len();
    (0..k)
        .map(|j| {
            let pos = j as f64 * (m - 1) as f64 / (k - 1) as f64;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if lo + 1 < m {
                u[lo] + frac * (u[lo + 1] - u[lo])
            } else {
                u[m - 1]
            }
        })
        .collect()
}

/// Natural cubic regression spline basis with `num_basis` knots at quantiles
/// of the distinct values of `x`.
pub fn build_basis(code: &str, x: &[f64], num_basis: usize) -> Result<SplineBasis, GamError> {
    if num_basis < 4 {
        return Err(GamError::BasisTooSmall(num_basis));
    }
    let mut distinct: Vec<f64> = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < num_basis {
        return Err(GamError::TooFewDistinctValues {
            code: code.to_string(),
            distinct: distinct.len(),
            needed: num_basis,
        });
    }
    let knots = place_knots(x, num_basis);
    Ok(SplineBasis::from_knots(code, knots))
}

impl SplineBasis {
    pub fn from_knots(code: &str, knots: Vec<f64>) -> Self {
        let k = knots.len();
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let mut d = DMatrix::zeros(k - 2, k);
        let mut b = DMatrix::zeros(k - 2, k - 2);
        for i in 0..k - 2 {
            d[(i, i)] = 1.0 / h[i];
            d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
            d[(i, i + 2)] = 1.0 / h[i + 1];
            b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
            if i + 1 < k - 2 {
                b[(i, i + 1)] = h[i + 1] / 6.0;
                b[(i + 1, i)] = h[i + 1] / 6.0;
            }
        }
        let chol = b.cholesky().expect("tridiagonal knot matrix is positive definite");
        let interior = chol.solve(&d);
        let mut second_deriv = DMatrix::zeros(k, k);
        second_deriv.view_mut((1, 0), (k - 2, k)).copy_from(&interior);
        let mut penalty = d.transpose() * &interior;
        crate::linalg::symmetrize(&mut penalty);
        Self {
            code: code.to_string(),
            knots,
            num_basis: k,
            penalty,
            second_deriv,
        }
    }

    fn interval(&self, x: f64) -> usize {
        let k = self.knots.len();
        match self.knots.binary_search_by(|kn| kn.total_cmp(&x)) {
            Ok(i) => i.min(k - 2),
            Err(i) => i.saturating_sub(1).min(k - 2),
        }
    }

    /// Basis row at `x`: f(x) = row · β. Linear extrapolation outside the knots.
    pub fn row(&self, x: f64) -> DVector<f64> {
        let k = self.knots.len();
        let (lo, hi) = (self.knots[0], self.knots[k - 1]);
        if x < lo || x > hi {
            let (edge, j) = if x < lo { (lo, 0) } else { (hi, k - 2) };
            let at_edge = self.row(edge);
            let slope = self.derivative_row(j, edge);
            return at_edge + slope * (x - edge);
        }
        let j = self.interval(x);
        let h = self.knots[j + 1] - self.knots[j];
        let am = (self.knots[j + 1] - x) / h;
        let ap = (x - self.knots[j]) / h;
        let cm = ((self.knots[j + 1] - x).powi(3) / h - h * (self.knots[j + 1] - x)) / 6.0;
        let cp = ((x - self.knots[j]).powi(3) / h - h * (x - self.knots[j])) / 6.0;
        let mut r: DVector<f64> = self.second_deriv.row(j).transpose() * cm
            + self.second_deriv.row(j + 1).transpose() * cp;
        r[j] += am;
        r[j + 1] += ap;
        r
    }

    fn derivative_row(&self, j: usize, x: f64) -> DVector<f64> {
        let h = self.knots[j + 1] - self.knots[j];
        let dm = (-3.0 * (self.knots[j + 1] - x).powi(2) / h + h) / 6.0;
        let dp = (3.0 * (x - self.knots[j]).powi(2) / h - h) / 6.0;
        let mut r: DVector<f64> = self.second_deriv.row(j).transpose() * dm
            + self.second_deriv.row(j + 1).transpose() * dp;
        r[j] -= 1.0 / h;
        r[j + 1] += 1.0 / h;
        r
    }

    /// Second derivative of the spline with knot values `beta` at `x`.
    pub fn second_derivative(&self, beta: &DVector<f64>, x: f64) -> f64 {
        let j = self.interval(x.clamp(self.knots[0], self.knots[self.knots.len() - 1]));
        let delta = &self.second_deriv * beta;
        let h = self.knots[j + 1] - self.knots[j];
        (delta[j] * (self.knots[j + 1] - x) + delta[j + 1] * (x - self.knots[j])) / h
    }

    /// n x k model matrix.
    pub fn design(&self, x: &[f64]) -> DMatrix<f64> {
        let k = self.num_basis;
        let mut m = DMatrix::zeros(x.len(), k);
        for (i, &xi) in x.iter().enumerate() {
            m.set_row(i, &self.row(xi).transpose());
        }
        m
    }
}

/// Null-space basis of the single linear constraint `cᵀβ = 0`, from a
/// Householder reflection mapping `c` onto the first axis.
fn constraint_null_space(c: &DVector<f64>) -> DMatrix<f64> {
    let k = c.len();
    let mut v = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * c.norm();
    let vv = v.norm_squared();
    let mut h = DMatrix::identity(k, k);
    if vv > 0.0 {
        h -= &v * v.transpose() * (2.0 / vv);
    }
    h.columns(1, k - 1).into_owned()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GamOptions {
    pub num_basis: usize,
    /// Candidate smoothing parameters, increasing.
    pub lambda_grid: Vec<f64>,
    pub sweeps: usize,
}

impl Default for GamOptions {
    fn default() -> Self {
        Self {
            num_basis: DEFAULT_NUM_BASIS,
            lambda_grid: default_lambda_grid(),
            sweeps: 3,
        }
    }
}

/// 25 log-spaced values from 1e-4 to 1e4.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..25).map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 24.0)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SmoothTerm {
    pub basis: SplineBasis,
    /// Knot values of the centered smooth.
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub edf: f64,
    /// The chosen λ sits at an end of the search grid.
    pub boundary: bool,
    /// Fitted f_j(x_i), mean zero over the sample.
    #[serde(skip)]
    pub fitted: DVector<f64>,
    /// Penalty quadratic form βᵀPβ of the fitted smooth.
    pub wiggliness: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GamFit {
    pub response_code: String,
    pub intercept: f64,
    pub terms: Vec<SmoothTerm>,
    #[serde(skip)]
    pub fitted: DVector<f64>,
    #[serde(skip)]
    pub residuals: DVector<f64>,
    /// Trace of the influence matrix, intercept included.
    pub total_edf: f64,
    pub gcv: f64,
}

impl GamFit {
    pub fn rss(&self) -> f64 {
        self.residuals.norm_squared()
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), GamError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Design pieces that do not depend on the smoothing parameters.
struct Prepared {
    bases: Vec<SplineBasis>,
    nulls: Vec<DMatrix<f64>>,
    design: DMatrix<f64>,
    /// Constrained penalties, one per term.
    penalties: Vec<DMatrix<f64>>,
    /// Column offset of each term in the design.
    offsets: Vec<usize>,
}

fn prepare(xs: &[DVector<f64>], codes: &[String], num_basis: usize) -> Result<Prepared, GamError> {
    let n = xs.first().map_or(0, |x| x.len());
    let mut bases = Vec::new();
    let mut nulls = Vec::new();
    let mut penalties = Vec::new();
    let mut offsets = Vec::new();
    let mut blocks = vec![DMatrix::from_element(n, 1, 1.0)];
    let mut col = 1;
    for (x, code) in xs.iter().zip(codes) {
        let basis = build_basis(code, x.as_slice(), num_basis)?;
        let raw = basis.design(x.as_slice());
        let sums = DVector::from_iterator(raw.ncols(), raw.column_iter().map(|c| c.sum()));
        let z0 = constraint_null_space(&sums);
        // rotate onto the penalty eigenbasis so the unpenalized directions stay exactly unpenalized
        let eig = (z0.transpose() * &basis.penalty * &z0).symmetric_eigen();
        let top = eig.eigenvalues.amax();
        let diag = eig.eigenvalues.map(|d| if d > 1e-10 * top { d } else { 0.0 });
        let z = &z0 * &eig.eigenvectors;
        blocks.push(&raw * &z);
        penalties.push(DMatrix::from_diagonal(&diag));
        offsets.push(col);
        col += z.ncols();
        nulls.push(z);
        bases.push(basis);
    }
    let mut design = DMatrix::zeros(n, col);
    let mut c = 0;
    for b in &blocks {
        design.view_mut((0, c), (n, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    Ok(Prepared {
        bases,
        nulls,
        design,
        penalties,
        offsets,
    })
}

struct Solved {
    coef: DVector<f64>,
    fitted: DVector<f64>,
    term_edf: Vec<f64>,
    total_edf: f64,
    gcv: f64,
}

fn solve_penalized(prep: &Prepared, y: &DVector<f64>, lambdas: &[f64]) -> Result<Solved, GamError> {
    let x = &prep.design;
    let (n, m) = x.shape();
    let mut pen = DMatrix::zeros(m, m);
    for (t, p) in prep.penalties.iter().enumerate() {
        let o = prep.offsets[t];
        let q = p.nrows();
        pen.view_mut((o, o), (q, q)).copy_from(&(p * lambdas[t]));
    }
    let root = DMatrix::from_diagonal(&pen.diagonal().map(f64::sqrt));
    let mut aug = DMatrix::zeros(n + m, m);
    aug.view_mut((0, 0), (n, m)).copy_from(x);
    aug.view_mut((n, 0), (m, m)).copy_from(&root);
    let qr = aug.qr();
    let r = qr.r();
    let rmax = (0..m).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..m).any(|i| r[(i, i)].abs() <= RANK_TOL * rmax) {
        return Err(GamError::IllConditionedSystem);
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(y);
    let qty = qr.q().transpose() * rhs;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or(GamError::IllConditionedSystem)?;
    let fitted = x * &coef;
    // (XᵀX + P)⁻¹ = R⁻¹ R⁻ᵀ ; influence-matrix trace via diag((XᵀX + P)⁻¹ XᵀX)
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(m, m))
        .ok_or(GamError::IllConditionedSystem)?;
    let xr = x * &r_inv;
    let f = &r_inv * (xr.transpose() * x);
    let diag = f.diagonal();
    let total_edf = diag.sum();
    let term_edf = prep
        .offsets
        .iter()
        .zip(&prep.penalties)
        .map(|(&o, p)| diag.rows(o, p.nrows()).sum())
        .collect();
    let rss = (y - &fitted).norm_squared();
    let denom = n as f64 - total_edf;
    let gcv = if denom > 0.0 {
        n as f64 * rss / (denom * denom)
    } else {
        f64::INFINITY
    };
    Ok(Solved {
        coef,
        fitted,
        term_edf,
        total_edf,
        gcv,
    })
}

fn assemble(
    prep: Prepared,
    solved: Solved,
    y: &DVector<f64>,
    response_code: &str,
    lambdas: &[f64],
    grid: &[f64],
) -> GamFit {
    let x = &prep.design;
    let mut terms = Vec::new();
    for (t, basis) in prep.bases.into_iter().enumerate() {
        let o = prep.offsets[t];
        let q = prep.nulls[t].ncols();
        let gamma = solved.coef.rows(o, q);
        let beta = &prep.nulls[t] * gamma;
        let fitted = x.columns(o, q) * gamma;
        let wiggliness = (beta.transpose() * &basis.penalty * &beta)[(0, 0)];
        let boundary = !grid.is_empty()
            && (lambdas[t] == grid[0] || lambdas[t] == grid[grid.len() - 1]);
        terms.push(SmoothTerm {
            basis,
            coefficients: beta.iter().copied().collect(),
            lambda: lambdas[t],
            edf: solved.term_edf[t],
            boundary,
            fitted,
            wiggliness,
        });
    }
    GamFit {
        response_code: response_code.to_string(),
        intercept: solved.coef[0],
        terms,
        residuals: y - &solved.fitted,
        fitted: solved.fitted,
        total_edf: solved.total_edf,
        gcv: solved.gcv,
    }
}

fn check_inputs(y: &DVector<f64>, xs: &[DVector<f64>], codes: &[String]) -> Result<(), GamError> {
    if xs.len() != codes.len() {
        return Err(GamError::InvalidInput("one code per smooth term".into()));
    }
    if xs.iter().any(|x| x.len() != y.len()) {
        return Err(GamError::InvalidInput("predictor length differs from response".into()));
    }
    Ok(())
}

/// Penalized least-squares fit at fixed smoothing parameters.
pub fn fit_gam_fixed(
    y: &DVector<f64>,
    xs: &[DVector<f64>],
    codes: &[String],
    lambdas: &[f64],
    num_basis: usize,
    response_code: &str,
) -> Result<GamFit, GamError> {
    check_inputs(y, xs, codes)?;
    if lambdas.len() != xs.len() || lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(GamError::InvalidInput("one non-negative λ per smooth term".into()));
    }
    let prep = prepare(xs, codes, num_basis)?;
    let solved = solve_penalized(&prep, y, lambdas)?;
    Ok(assemble(prep, solved, y, response_code, lambdas, &[]))
}

/// Index of the largest grid λ whose GCV is within rounding of the minimum.
fn pick_smoothest(scores: &[Option<f64>], tie: f64) -> Option<usize> {
    let min = scores.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    let slack = tie + 1e-9 * min.abs();
    (0..scores.len())
        .rev()
        .find(|&i| scores[i].is_some_and(|s| s <= min + slack))
}

/// GCV-selected additive model. Smoothing parameters start at the grid
/// point nearest 1 and are optimized one term at a time for `sweeps` passes
/// (stopping early when a pass changes nothing). GCV ties within rounding go
/// to the larger λ.
pub fn fit_gam_matrix(
    y: &DVector<f64>,
    xs: &[DVector<f64>],
    codes: &[String],
    opts: &GamOptions,
    response_code: &str,
) -> Result<GamFit, GamError> {
    check_inputs(y, xs, codes)?;
    let grid = &opts.lambda_grid;
    if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(GamError::InvalidInput("λ grid must be non-empty and >= 0".into()));
    }
    let n = y.len();
    let total_basis: usize = xs.len() * opts.num_basis;
    if 2 * n <= total_basis {
        return Err(GamError::InvalidInput(format!(
            "{n} observations are too few for {total_basis} basis functions"
        )));
    }
    let prep = prepare(xs, codes, opts.num_basis)?;
    let mean = y.mean();
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let tie = 1e-12 * var.max(f64::MIN_POSITIVE);
    let start = (0..grid.len())
        .min_by(|&a, &b| grid[a].ln().abs().total_cmp(&grid[b].ln().abs()))
        .expect("non-empty grid");
    let mut chosen = vec![start; xs.len()];
    for _ in 0..opts.sweeps.max(1) {
        let mut changed = false;
        for t in 0..xs.len() {
            let scores: Vec<Option<f64>> = (0..grid.len())
                .into_par_iter()
                .map(|g| {
                    let mut lam: Vec<f64> = chosen.iter().map(|&c| grid[c]).collect();
                    lam[t] = grid[g];
                    solve_penalized(&prep, y, &lam).ok().map(|s| s.gcv)
                })
                .collect();
            let best = pick_smoothest(&scores, tie).ok_or(GamError::IllConditionedSystem)?;
            if best != chosen[t] {
                chosen[t] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let lambdas: Vec<f64> = chosen.iter().map(|&c| grid[c]).collect();
    let solved = solve_penalized(&prep, y, &lambdas)?;
    Ok(assemble(prep, solved, y, response_code, &lambdas, grid))
}

pub fn fit_gam(
    d: &StandardizedDataset,
    response: &str,
    smooth_terms: &[String],
    opts: &GamOptions,
) -> Result<GamFit, GamError> {
    let y = d.column(response)?;
    let xs = smooth_terms
        .iter()
        .map(|c| d.column(c))
        .collect::<Result<Vec<_>, _>>()?;
    fit_gam_matrix(&y, &xs, smooth_terms, opts, response)
}

/// Residuals of `target` after removing smooth effects of `controls`.
pub fn partial_out(
    d: &StandardizedDataset,
    target: &str,
    controls: &[String],
    opts: &GamOptions,
) -> Result<DVector<f64>, GamError> {
    Ok(fit_gam(d, target, controls, opts)?.residuals)
}

/// `id,value` residual table.
pub fn write_residuals_csv<W: Write>(
    out: W,
    id_column: &str,
    row_ids: &[String],
    residuals: &DVector<f64>,
) -> Result<(), GamError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([id_column, "value"])?;
    for (id, r) in row_ids.iter().zip(residuals.iter()) {
        w.write_record([id.clone(), r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
