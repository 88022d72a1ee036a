//! Weighted linear quantile regression solved exactly as a linear program.
//!
//! The primal problem is `min_b Σ wᵢ ρ_τ(yᵢ − xᵢᵀb)`. It is solved through its
//! dual, `max yᵀd` subject to `Xᵀd = (1 − τ)Xᵀw` and `0 ≤ dᵢ ≤ wᵢ`, with a
//! bounded-variable primal simplex. At an optimal basis the simplex
//! multipliers are the regression coefficients, and the gap between the two
//! objectives certifies optimality.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantRegError {
    #[error("design has {rows} rows but response has {len}")]
    DimensionMismatch { rows: usize, len: usize },
    #[error("τ must lie in (0, 1), got {0}")]
    InvalidTau(f64),
    #[error("weights must be finite and non-negative")]
    InvalidWeights,
    #[error("design is rank deficient on the weighted observations")]
    RankDeficient,
    #[error("simplex did not terminate within {0} iterations")]
    IterationLimit(usize),
}

#[derive(Debug, Clone)]
pub struct QuantRegFit {
    pub coefficients: DVector<f64>,
    /// Σ wᵢ ρ_τ(yᵢ − xᵢᵀb) over every observation.
    pub objective: f64,
    /// Dual objective at the final basis.
    pub dual_objective: f64,
    pub iterations: usize,
}

impl QuantRegFit {
    pub fn duality_gap(&self) -> f64 {
        self.objective - self.dual_objective
    }
}

/// Check loss ρ_τ(u) = u(τ − 1{u < 0}).
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

pub fn weighted_objective(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    tau: f64,
    b: &DVector<f64>,
) -> f64 {
    let r = y - x * b;
    r.iter().zip(w.iter()).map(|(&u, &wi)| wi * check_loss(u, tau)).sum()
}

/// Observations whose weight falls below this fraction of the largest weight
/// are left out of the LP; their contribution to the objective is still
/// counted in the reported value.
pub const NEGLIGIBLE_WEIGHT: f64 = 1e-14;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Status {
    Basic,
    Lower,
    Upper,
}

struct Simplex<'a> {
    /// Constraint columns, one per variable (structural then artificial).
    cols: Vec<DVector<f64>>,
    upper: Vec<f64>,
    cost: Vec<f64>,
    rhs: &'a DVector<f64>,
    status: Vec<Status>,
    basis: Vec<usize>,
    feas_tol: f64,
    dual_tol: f64,
    iterations: usize,
    max_iterations: usize,
}

enum Step {
    Optimal,
    Progress,
}

impl Simplex<'_> {
    fn basis_matrix(&self) -> DMatrix<f64> {
        let p = self.rhs.len();
        let mut b = DMatrix::zeros(p, p);
        for (k, &j) in self.basis.iter().enumerate() {
            b.set_column(k, &self.cols[j]);
        }
        b
    }

    fn value_of_nonbasic(&self, j: usize) -> f64 {
        match self.status[j] {
            Status::Upper => self.upper[j],
            _ => 0.0,
        }
    }

    fn basic_values(&self, lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> DVector<f64> {
        let mut r = self.rhs.clone();
        for (j, col) in self.cols.iter().enumerate() {
            if self.status[j] == Status::Upper {
                r.axpy(-self.upper[j], col, 1.0);
            }
        }
        lu.solve(&r).expect("basis is kept non-singular")
    }

    /// Simplex multipliers π solving Bᵀπ = c_B.
    fn multipliers(&self) -> DVector<f64> {
        let cb = DVector::from_iterator(self.basis.len(), self.basis.iter().map(|&j| self.cost[j]));
        self.basis_matrix()
            .transpose()
            .lu()
            .solve(&cb)
            .expect("basis is kept non-singular")
    }

    /// One pricing + ratio-test step. `bland` selects the smallest eligible
    /// index instead of the steepest reduced cost.
    fn step(&mut self, bland: bool) -> Result<(Step, bool), QuantRegError> {
        self.iterations += 1;
        if self.iterations > self.max_iterations {
            return Err(QuantRegError::IterationLimit(self.max_iterations));
        }
        let lu = self.basis_matrix().lu();
        let xb = self.basic_values(&lu);
        let pi = self.multipliers();

        let mut entering: Option<(usize, f64)> = None;
        for j in 0..self.cols.len() {
            let st = self.status[j];
            if st == Status::Basic || self.upper[j] <= 0.0 {
                continue;
            }
            let d = self.cost[j] - pi.dot(&self.cols[j]);
            let eligible = (st == Status::Lower && d > self.dual_tol) || (st == Status::Upper && d < -self.dual_tol);
            if !eligible {
                continue;
            }
            if bland {
                entering = Some((j, d));
                break;
            }
            if entering.is_none_or(|(_, best)| d.abs() > best.abs()) {
                entering = Some((j, d));
            }
        }
        let Some((q, dq)) = entering else {
            return Ok((Step::Optimal, false));
        };
        let s = if dq > 0.0 { 1.0 } else { -1.0 };
        let alpha = lu.solve(&self.cols[q]).expect("basis is kept non-singular");
        let amax = alpha.amax().max(1.0);
        let piv_tol = 1e-9 * amax;

        // entering moves by s·t; basic values move by −s·t·α
        let mut t_best = self.upper[q];
        let mut leave: Option<(usize, Status, f64)> = None;
        for k in 0..self.basis.len() {
            let a = s * alpha[k];
            let j = self.basis[k];
            let (t, to) = if a > piv_tol {
                ((xb[k].max(0.0)) / a, Status::Lower)
            } else if a < -piv_tol && self.upper[j].is_finite() {
                (((self.upper[j] - xb[k]).max(0.0)) / -a, Status::Upper)
            } else {
                continue;
            };
            let better = match leave {
                None => t < t_best,
                Some((kb, _, ab)) => {
                    if t < t_best - self.feas_tol {
                        true
                    } else if t <= t_best + self.feas_tol {
                        if bland {
                            j < self.basis[kb]
                        } else {
                            a.abs() > ab
                        }
                    } else {
                        false
                    }
                }
            };
            if better {
                t_best = t;
                leave = Some((k, to, a.abs()));
            }
        }
        if !t_best.is_finite() {
            // dual feasible region is bounded, so this signals a broken basis
            return Err(QuantRegError::RankDeficient);
        }
        let degenerate = t_best <= self.feas_tol;
        match leave {
            None => {
                // bound flip of the entering variable
                self.status[q] = if self.status[q] == Status::Lower { Status::Upper } else { Status::Lower };
            }
            Some((k, to, _)) => {
                let out = self.basis[k];
                self.status[out] = to;
                self.status[q] = Status::Basic;
                self.basis[k] = q;
            }
        }
        Ok((Step::Progress, degenerate))
    }

    fn run(&mut self) -> Result<(), QuantRegError> {
        let mut degenerate_streak = 0usize;
        loop {
            let bland = degenerate_streak > 50;
            let (step, degenerate) = self.step(bland)?;
            if let Step::Optimal = step {
                return Ok(());
            }
            degenerate_streak = if degenerate { degenerate_streak + 1 } else { 0 };
        }
    }
}

/// Minimizes `Σ wᵢ ρ_τ(yᵢ − xᵢᵀb)` exactly.
pub fn weighted_quantile_regression(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    tau: f64,
) -> Result<QuantRegFit, QuantRegError> {
    let (n, p) = x.shape();
    if y.len() != n || w.len() != n {
        return Err(QuantRegError::DimensionMismatch { rows: n, len: y.len().min(w.len()) });
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(QuantRegError::InvalidTau(tau));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(QuantRegError::InvalidWeights);
    }
    let wmax = w.max();
    if wmax <= 0.0 || n < p {
        return Err(QuantRegError::RankDeficient);
    }
    let keep: Vec<usize> = (0..n).filter(|&i| w[i] > NEGLIGIBLE_WEIGHT * wmax).collect();
    if keep.len() < p {
        return Err(QuantRegError::RankDeficient);
    }

    let rows: Vec<DVector<f64>> = keep.iter().map(|&i| x.row(i).transpose()).collect();
    let mut rhs = DVector::zeros(p);
    for (r, &i) in rows.iter().zip(&keep) {
        rhs.axpy((1.0 - tau) * w[i], r, 1.0);
    }

    // start with the largest responses at their upper bound until the
    // intercept-style balance (1 − τ)Σw is reached
    let m = keep.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| y[keep[b]].total_cmp(&y[keep[a]]).then(a.cmp(&b)));
    let target: f64 = (1.0 - tau) * keep.iter().map(|&i| w[i]).sum::<f64>();
    let mut status = vec![Status::Lower; m + p];
    let mut acc = 0.0;
    for &k in &order {
        let wi = w[keep[k]];
        if acc + wi > target {
            break;
        }
        acc += wi;
        status[k] = Status::Upper;
    }
    let mut resid = rhs.clone();
    for k in 0..m {
        if status[k] == Status::Upper {
            resid.axpy(-w[keep[k]], &rows[k], 1.0);
        }
    }

    let mut cols = rows;
    let mut upper: Vec<f64> = keep.iter().map(|&i| w[i]).collect();
    for r in 0..p {
        let mut e = DVector::zeros(p);
        e[r] = if resid[r] < 0.0 { -1.0 } else { 1.0 };
        cols.push(e);
        upper.push(f64::INFINITY);
        status[m + r] = Status::Basic;
    }
    let basis: Vec<usize> = (m..m + p).collect();

    let yscale = keep.iter().map(|&i| y[i].abs()).fold(1.0, f64::max);
    let xscale = x.amax().max(1.0);
    let feas_tol = 1e-12 * wmax * xscale * m as f64;
    let mut lp = Simplex {
        cols,
        upper,
        cost: (0..m + p).map(|j| if j < m { 0.0 } else { -1.0 }).collect(),
        rhs: &rhs,
        status,
        basis,
        feas_tol,
        dual_tol: 1e-11,
        iterations: 0,
        max_iterations: 50 * (m + p) + 1000,
    };
    lp.run()?;

    // phase 2: artificials pinned at zero and driven out of the basis
    let lu = lp.basis_matrix().lu();
    let xb = lp.basic_values(&lu);
    let infeasibility: f64 = lp
        .basis
        .iter()
        .zip(xb.iter())
        .filter(|(&j, _)| j >= m)
        .map(|(_, v)| v.abs())
        .sum();
    if infeasibility > 1e-8 * wmax * xscale * m as f64 {
        return Err(QuantRegError::RankDeficient);
    }
    for j in m..m + p {
        lp.upper[j] = 0.0;
    }
    drive_out_artificials(&mut lp, m)?;
    lp.cost = (0..m + p).map(|j| if j < m { y[keep[j]] } else { 0.0 }).collect();
    lp.dual_tol = 1e-11 * yscale;
    lp.run()?;

    let lu = lp.basis_matrix().lu();
    let coefficients = lp.multipliers();
    let xb = lp.basic_values(&lu);
    let mut dual = 0.0;
    for (k, &i) in keep.iter().enumerate() {
        let v = match lp.status[k] {
            Status::Basic => {
                let pos = lp.basis.iter().position(|&j| j == k).expect("basic variable in basis");
                xb[pos]
            }
            _ => lp.value_of_nonbasic(k),
        };
        dual += y[i] * (v - (1.0 - tau) * w[i]);
    }
    let objective = weighted_objective(x, y, w, tau, &coefficients);
    Ok(QuantRegFit {
        coefficients,
        objective,
        dual_objective: dual,
        iterations: lp.iterations,
    })
}

/// Replaces basic artificials (at value zero) with structural columns.
fn drive_out_artificials(lp: &mut Simplex<'_>, m: usize) -> Result<(), QuantRegError> {
    for k in 0..lp.basis.len() {
        if lp.basis[k] < m {
            continue;
        }
        let lu = lp.basis_matrix().lu();
        let mut best: Option<(usize, f64)> = None;
        for j in 0..m {
            if lp.status[j] == Status::Basic {
                continue;
            }
            let a = lu.solve(&lp.cols[j]).expect("basis is kept non-singular")[k].abs();
            if a > 1e-9 && best.is_none_or(|(_, b)| a > b) {
                best = Some((j, a));
            }
        }
        let Some((j, _)) = best else {
            return Err(QuantRegError::RankDeficient);
        };
        // degenerate pivot: the artificial sits at zero, so the basic
        // solution is unchanged and j keeps its current value
        let art = lp.basis[k];
        lp.status[art] = Status::Lower;
        lp.status[j] = Status::Basic;
        lp.basis[k] = j;
    }
    Ok(())
}
