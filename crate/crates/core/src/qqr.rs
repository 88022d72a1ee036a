//! Quantile-on-quantile regression.
//!
//! For each pair (τ, θ) a kernel-weighted local linear quantile regression of
//! y on (x − x_θ) and controls z is fitted, where x_θ is the θ-quantile of x.
//! The slopes β̂(τ, θ) form the effect surface.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, StandardizedDataset};
use crate::gam::{partial_out, GamError, GamOptions};
use crate::quantreg::{weighted_quantile_regression, QuantRegError};

/// A cell is skipped when its total kernel weight is below that of this many
/// fully weighted observations.
pub const MIN_EFFECTIVE_OBSERVATIONS: f64 = 5.0;
pub const DEFAULT_BANDWIDTH: f64 = 0.05;
const DEGENERATE_WEIGHT: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum QqrError {
    #[error("invalid quantile grid: {0}")]
    InvalidGrid(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("all kernel weights are below {DEGENERATE_WEIGHT:e}")]
    DegenerateWeights,
    #[error("insufficient local data at τ={tau}, θ={theta}: weight mass {mass:.4} below floor {floor:.4}")]
    InsufficientLocalData { tau: f64, theta: f64, mass: f64, floor: f64 },
    #[error("local design is collinear at τ={tau}, θ={theta}")]
    Unbounded { tau: f64, theta: f64 },
    #[error("input lengths disagree: {0}")]
    DimensionMismatch(String),
    #[error("too few observations: n={n} with {q} controls")]
    TooFewObservations { n: usize, q: usize },
    #[error("quantile regression failed: {0}")]
    Solver(#[from] QuantRegError),
    #[error("malformed surface file: {0}")]
    Parse(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gam(#[from] GamError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    pub taus: Vec<f64>,
    pub thetas: Vec<f64>,
}

/// `{start, stop, step}` description of one grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridAxis {
    pub fn values(&self) -> Result<Vec<f64>, QqrError> {
        let GridAxis { start, stop, step } = *self;
        if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
            return Err(QqrError::InvalidGrid(format!("bad axis {start}:{step}:{stop}")));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        // rounding keeps 0.1 + 2·0.1 printing as 0.3
        Ok((0..count)
            .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
            .collect())
    }
}

impl QuantileGrid {
    pub fn new(taus: Vec<f64>, thetas: Vec<f64>) -> Result<Self, QqrError> {
        for (name, v) in [("τ", &taus), ("θ", &thetas)] {
            if v.is_empty() {
                return Err(QqrError::InvalidGrid(format!("{name} axis is empty")));
            }
            if v.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
                return Err(QqrError::InvalidGrid(format!("{name} values must lie in (0, 1)")));
            }
            if v.windows(2).any(|w| w[1] <= w[0]) {
                return Err(QqrError::InvalidGrid(format!("{name} values must be strictly increasing")));
            }
        }
        Ok(Self { taus, thetas })
    }

    pub fn from_axes(tau: GridAxis, theta: GridAxis) -> Result<Self, QqrError> {
        Self::new(tau.values()?, theta.values()?)
    }

    /// 0.10 to 0.90 in steps of 0.10 on both axes.
    pub fn central() -> Self {
        let a = GridAxis { start: 0.1, stop: 0.9, step: 0.1 };
        Self::from_axes(a, a).expect("valid preset")
    }

    /// 0.01 to 0.99 in steps of 0.01 on both axes.
    pub fn fine() -> Self {
        let a = GridAxis { start: 0.01, stop: 0.99, step: 0.01 };
        Self::from_axes(a, a).expect("valid preset")
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.taus.len(), self.thetas.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocateOn {
    /// Distance measured between empirical CDF values and θ.
    RankScale,
    /// Distance measured between x and its θ-quantile, scaled by 1/h.
    ValueScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
    pub locate_on: LocateOn,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            family: KernelFamily::Gaussian,
            bandwidth: DEFAULT_BANDWIDTH,
            locate_on: LocateOn::RankScale,
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), QqrError> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(QqrError::InvalidKernel(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        Ok(())
    }

    fn density(&self, u: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }

    /// Weight mass of `MIN_EFFECTIVE_OBSERVATIONS` observations at the kernel mode.
    pub fn weight_floor(&self) -> f64 {
        let peak = match self.locate_on {
            LocateOn::RankScale => self.density(0.0),
            LocateOn::ValueScale => self.density(0.0) / self.bandwidth,
        };
        MIN_EFFECTIVE_OBSERVATIONS * peak
    }
}

/// How controls enter the local regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QqrMode {
    /// Standardized controls enter linearly alongside x.
    Controls,
    /// y and x are replaced by residuals after smoothing out the controls.
    Residuals,
}

/// Left-continuous inverse of the empirical CDF: the smallest order
/// statistic x₍ₖ₎ with k/n ≥ θ.
pub fn empirical_quantile(x: &[f64], theta: f64) -> f64 {
    assert!(!x.is_empty(), "empirical quantile of an empty sample");
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_of_sorted(&s, theta)
}

fn quantile_of_sorted(s: &[f64], theta: f64) -> f64 {
    let n = s.len();
    let mut k = ((n as f64 * theta).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= theta {
        k -= 1;
    }
    while k < n && (k as f64) / (n as f64) < theta {
        k += 1;
    }
    s[k - 1]
}

/// Empirical CDF at each observation, with tied observations sharing the
/// average of their positions: F̂(xᵢ) = mean rank / n.
pub fn empirical_cdf(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = avg / n as f64;
        }
        start = end;
    }
    out
}

pub fn kernel_weights(x: &[f64], theta: f64, spec: &KernelSpec) -> Result<DVector<f64>, QqrError> {
    spec.validate()?;
    let h = spec.bandwidth;
    let w = match spec.locate_on {
        LocateOn::RankScale => {
            let f = empirical_cdf(x);
            DVector::from_iterator(x.len(), f.iter().map(|&fi| spec.density((fi - theta) / h)))
        }
        LocateOn::ValueScale => {
            let xt = empirical_quantile(x, theta);
            DVector::from_iterator(x.len(), x.iter().map(|&xi| spec.density((xi - xt) / h) / h))
        }
    };
    if w.is_empty() || w.max() < DEGENERATE_WEIGHT {
        return Err(QqrError::DegenerateWeights);
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalQuantileFit {
    pub tau: f64,
    pub theta: f64,
    pub x_theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: Vec<f64>,
    pub effective_weight_mass: f64,
    pub converged: bool,
    /// Weighted check-loss at the solution.
    pub objective: f64,
    /// Primal minus dual objective of the LP.
    pub duality_gap: f64,
}

fn check_dims(y: &DVector<f64>, x: &DVector<f64>, z: &DMatrix<f64>) -> Result<(), QqrError> {
    let n = y.len();
    if x.len() != n || z.nrows() != n {
        return Err(QqrError::DimensionMismatch(format!(
            "y has {n} rows, x {}, controls {}",
            x.len(),
            z.nrows()
        )));
    }
    if n <= z.ncols() + 2 {
        return Err(QqrError::TooFewObservations { n, q: z.ncols() });
    }
    Ok(())
}

/// Local design [1, x − x_θ, Z].
fn local_design(x: &DVector<f64>, x_theta: f64, z: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, q) = (x.len(), z.ncols());
    DMatrix::from_fn(n, q + 2, |i, j| match j {
        0 => 1.0,
        1 => x[i] - x_theta,
        _ => z[(i, j - 2)],
    })
}

/// Weights and quantile for one θ, shared by every τ.
struct ThetaColumn {
    x_theta: f64,
    weights: DVector<f64>,
    mass: f64,
}

fn theta_column(x: &DVector<f64>, theta: f64, spec: &KernelSpec) -> Result<ThetaColumn, QqrError> {
    let weights = kernel_weights(x.as_slice(), theta, spec)?;
    Ok(ThetaColumn {
        x_theta: empirical_quantile(x.as_slice(), theta),
        mass: weights.sum(),
        weights,
    })
}

fn fit_cell(
    y: &DVector<f64>,
    design: &DMatrix<f64>,
    col: &ThetaColumn,
    tau: f64,
    theta: f64,
    spec: &KernelSpec,
) -> Result<LocalQuantileFit, QqrError> {
    let floor = spec.weight_floor();
    if col.mass < floor {
        return Err(QqrError::InsufficientLocalData { tau, theta, mass: col.mass, floor });
    }
    let fit = match weighted_quantile_regression(design, y, &col.weights, tau) {
        Ok(f) => f,
        Err(QuantRegError::RankDeficient) => return Err(QqrError::Unbounded { tau, theta }),
        Err(e) => return Err(e.into()),
    };
    let c = &fit.coefficients;
    Ok(LocalQuantileFit {
        tau,
        theta,
        x_theta: col.x_theta,
        alpha: c[0],
        beta: c[1],
        gamma: c.iter().skip(2).copied().collect(),
        effective_weight_mass: col.mass,
        converged: true,
        objective: fit.objective,
        duality_gap: fit.duality_gap(),
    })
}

/// Minimizes Σ ρ_τ(yᵢ − α − β(xᵢ − x_θ) − zᵢᵀγ)·wᵢ exactly.
pub fn local_quantile_fit(
    y: &DVector<f64>,
    x: &DVector<f64>,
    z: &DMatrix<f64>,
    tau: f64,
    theta: f64,
    spec: &KernelSpec,
) -> Result<LocalQuantileFit, QqrError> {
    check_dims(y, x, z)?;
    if !(tau > 0.0 && tau < 1.0 && theta > 0.0 && theta < 1.0) {
        return Err(QqrError::InvalidGrid(format!("(τ, θ) = ({tau}, {theta}) outside (0, 1)²")));
    }
    let col = theta_column(x, theta, spec)?;
    let design = local_design(x, col.x_theta, z);
    fit_cell(y, &design, &col, tau, theta, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub tau_index: usize,
    pub theta_index: usize,
    pub tau: f64,
    pub theta: f64,
    pub weight_mass: f64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct QqrSurface {
    pub grid: QuantileGrid,
    pub kernel: KernelSpec,
    pub mode: QqrMode,
    /// Row-major over τ, then θ; `None` where the cell was skipped.
    pub cells: Vec<Option<LocalQuantileFit>>,
    pub skipped_cells: Vec<SkippedCell>,
}

/// Mean β̂ over the four quadrants split at 0.5 and a central window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    /// τ < 0.5, θ < 0.5
    pub low_tau_low_theta: Option<f64>,
    /// τ < 0.5, θ > 0.5
    pub low_tau_high_theta: Option<f64>,
    /// τ > 0.5, θ < 0.5
    pub high_tau_low_theta: Option<f64>,
    /// τ > 0.5, θ > 0.5
    pub high_tau_high_theta: Option<f64>,
    /// |τ − 0.5| ≤ 0.1 and |θ − 0.5| ≤ 0.1
    pub center: Option<f64>,
}

impl RegionSummary {
    pub fn entries(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("low_tau_low_theta", self.low_tau_low_theta),
            ("low_tau_high_theta", self.low_tau_high_theta),
            ("high_tau_low_theta", self.high_tau_low_theta),
            ("high_tau_high_theta", self.high_tau_high_theta),
            ("center", self.center),
        ]
    }
}

pub const CENTER_HALF_WIDTH: f64 = 0.1;

impl QqrSurface {
    pub fn cell(&self, ti: usize, hi: usize) -> Option<&LocalQuantileFit> {
        self.cells[ti * self.grid.thetas.len() + hi].as_ref()
    }

    pub fn beta(&self, ti: usize, hi: usize) -> Option<f64> {
        self.cell(ti, hi).map(|c| c.beta)
    }

    pub fn fitted_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn region_summary(&self) -> RegionSummary {
        let mean_where = |pred: &dyn Fn(f64, f64) -> bool| {
            let mut s = 0.0;
            let mut k = 0usize;
            for (ti, &t) in self.grid.taus.iter().enumerate() {
                for (hi, &h) in self.grid.thetas.iter().enumerate() {
                    if let Some(b) = self.beta(ti, hi).filter(|_| pred(t, h)) {
                        s += b;
                        k += 1;
                    }
                }
            }
            (k > 0).then(|| s / k as f64)
        };
        let eps = 1e-9;
        RegionSummary {
            low_tau_low_theta: mean_where(&|t, h| t < 0.5 && h < 0.5),
            low_tau_high_theta: mean_where(&|t, h| t < 0.5 && h > 0.5),
            high_tau_low_theta: mean_where(&|t, h| t > 0.5 && h < 0.5),
            high_tau_high_theta: mean_where(&|t, h| t > 0.5 && h > 0.5),
            center: mean_where(&|t, h| {
                (t - 0.5).abs() <= CENTER_HALF_WIDTH + eps && (h - 0.5).abs() <= CENTER_HALF_WIDTH + eps
            }),
        }
    }

    pub fn table(&self) -> SurfaceTable {
        let nt = self.grid.thetas.len();
        let skipped_mass = |ti: usize, hi: usize| {
            self.skipped_cells
                .iter()
                .find(|s| s.tau_index == ti && s.theta_index == hi)
                .map_or(0.0, |s| s.weight_mass)
        };
        let rows = self
            .cells
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let (ti, hi) = (k / nt, k % nt);
                SurfaceRow {
                    tau: self.grid.taus[ti],
                    theta: self.grid.thetas[hi],
                    beta: c.as_ref().map(|c| c.beta),
                    alpha: c.as_ref().map(|c| c.alpha),
                    weight_mass: c.as_ref().map_or_else(|| skipped_mass(ti, hi), |c| c.effective_weight_mass),
                    skipped: c.is_none(),
                }
            })
            .collect();
        SurfaceTable {
            manifest: SurfaceManifest {
                grid: self.grid.clone(),
                kernel: self.kernel,
                mode: self.mode,
                bandwidth: self.kernel.bandwidth,
                skipped: self.skipped_cells.clone(),
            },
            rows,
        }
    }
}

/// Fits every (τ, θ) cell. Cells that cannot be fitted are listed in
/// `skipped_cells` with the reason; they are never interpolated.
pub fn qqr_surface(
    y: &DVector<f64>,
    x: &DVector<f64>,
    z: &DMatrix<f64>,
    grid: &QuantileGrid,
    spec: &KernelSpec,
) -> Result<QqrSurface, QqrError> {
    check_dims(y, x, z)?;
    spec.validate()?;
    QuantileGrid::new(grid.taus.clone(), grid.thetas.clone())?;
    let columns: Vec<Result<(ThetaColumn, DMatrix<f64>), QqrError>> = grid
        .thetas
        .par_iter()
        .map(|&theta| {
            let col = theta_column(x, theta, spec)?;
            let design = local_design(x, col.x_theta, z);
            Ok((col, design))
        })
        .collect();
    let (nt, nh) = grid.shape();
    let results: Vec<Result<LocalQuantileFit, (f64, String)>> = (0..nt * nh)
        .into_par_iter()
        .map(|k| {
            let (ti, hi) = (k / nh, k % nh);
            let (tau, theta) = (grid.taus[ti], grid.thetas[hi]);
            match &columns[hi] {
                Err(e) => Err((0.0, e.to_string())),
                Ok((col, design)) => fit_cell(y, design, col, tau, theta, spec).map_err(|e| (col.mass, e.to_string())),
            }
        })
        .collect();
    let mut cells = Vec::with_capacity(nt * nh);
    let mut skipped_cells = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(fit) => cells.push(Some(fit)),
            Err((mass, reason)) => {
                let (ti, hi) = (k / nh, k % nh);
                skipped_cells.push(SkippedCell {
                    tau_index: ti,
                    theta_index: hi,
                    tau: grid.taus[ti],
                    theta: grid.thetas[hi],
                    weight_mass: mass,
                    reason,
                });
                cells.push(None);
            }
        }
    }
    Ok(QqrSurface {
        grid: grid.clone(),
        kernel: *spec,
        mode: QqrMode::Controls,
        cells,
        skipped_cells,
    })
}

/// Surface of `response` on `regressor` from standardized data, with the
/// controls handled according to `mode`.
#[allow(clippy::too_many_arguments)]
pub fn surface_from_dataset(
    d: &StandardizedDataset,
    response: &str,
    regressor: &str,
    controls: &[String],
    mode: QqrMode,
    grid: &QuantileGrid,
    spec: &KernelSpec,
    gam: &GamOptions,
) -> Result<QqrSurface, QqrError> {
    let (y, x, z) = match mode {
        QqrMode::Controls => (d.column(response)?, d.column(regressor)?, d.columns_matrix(controls)?),
        QqrMode::Residuals => (
            partial_out(d, response, controls, gam)?,
            partial_out(d, regressor, controls, gam)?,
            DMatrix::zeros(d.n(), 0),
        ),
    };
    let mut s = qqr_surface(&y, &x, &z, grid, spec)?;
    s.mode = mode;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceManifest {
    pub grid: QuantileGrid,
    pub kernel: KernelSpec,
    pub mode: QqrMode,
    pub bandwidth: f64,
    pub skipped: Vec<SkippedCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub tau: f64,
    pub theta: f64,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub weight_mass: f64,
    pub skipped: bool,
}

/// The exported form of a surface: the long table plus its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceTable {
    pub manifest: SurfaceManifest,
    pub rows: Vec<SurfaceRow>,
}

const SURFACE_HEADER: [&str; 6] = ["tau", "theta", "beta", "alpha", "weight_mass", "skipped_flag"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes the long-format surface CSV and its JSON manifest.
pub fn export_surface<W1: Write, W2: Write>(s: &QqrSurface, csv_out: W1, manifest_out: W2) -> Result<(), QqrError> {
    let table = s.table();
    let mut w = csv::Writer::from_writer(csv_out);
    w.write_record(SURFACE_HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.tau.to_string(),
            r.theta.to_string(),
            opt(r.beta),
            opt(r.alpha),
            r.weight_mass.to_string(),
            r.skipped.to_string(),
        ])?;
    }
    w.flush()?;
    let mut m = manifest_out;
    serde_json::to_writer_pretty(&mut m, &table.manifest)?;
    m.write_all(b"\n")?;
    Ok(())
}

pub fn read_surface<R1: Read, R2: Read>(csv_in: R1, manifest_in: R2) -> Result<SurfaceTable, QqrError> {
    let manifest: SurfaceManifest = serde_json::from_reader(manifest_in)?;
    let mut r = csv::Reader::from_reader(csv_in);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != SURFACE_HEADER {
        return Err(QqrError::Parse(format!("unexpected header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| QqrError::Parse(format!("not a number: {s:?}")));
    let opt_num = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != SURFACE_HEADER.len() {
            return Err(QqrError::Parse(format!("row has {} fields", rec.len())));
        }
        let skipped = match &rec[5] {
            "true" => true,
            "false" => false,
            other => return Err(QqrError::Parse(format!("bad skipped flag {other:?}"))),
        };
        rows.push(SurfaceRow {
            tau: num(&rec[0])?,
            theta: num(&rec[1])?,
            beta: opt_num(&rec[2])?,
            alpha: opt_num(&rec[3])?,
            weight_mass: num(&rec[4])?,
            skipped,
        });
    }
    let (nt, nh) = manifest.grid.shape();
    if rows.len() != nt * nh {
        return Err(QqrError::Parse(format!("expected {} rows, found {}", nt * nh, rows.len())));
    }
    Ok(SurfaceTable { manifest, rows })
}
