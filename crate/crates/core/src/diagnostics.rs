//! Least-squares diagnostics: Pearson correlations, variance inflation
//! factors and Cook's distance with the 4/n influence cutoff.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{DatasetError, StandardizedDataset};
use crate::linalg::{qr_least_squares, with_intercept};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("design matrix is rank deficient or has too few rows")]
    RankDeficientDesign,
    #[error("predictor `{0}` is perfectly collinear with the others")]
    PerfectCollinearity(String),
    #[error("observation `{0}` has leverage one")]
    LeverageOne(String),
    #[error("residual variance is zero")]
    ZeroResidualVariance,
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pearson correlation matrix of the columns of `x`.
pub fn pearson(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mut centered = x.clone();
    for j in 0..p {
        let mean = x.column(j).sum() / n as f64;
        centered.column_mut(j).add_scalar_mut(-mean);
    }
    let cross = centered.transpose() * &centered;
    let mut r = DMatrix::identity(p, p);
    for i in 0..p {
        for j in (i + 1)..p {
            let v = (cross[(i, j)] / (cross[(i, i)] * cross[(j, j)]).sqrt()).clamp(-1.0, 1.0);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

pub fn pearson_matrix(d: &StandardizedDataset) -> Result<DMatrix<f64>, DiagnosticsError> {
    if d.n() < 3 {
        return Err(DiagnosticsError::TooFew {
            what: "observations",
            needed: 3,
            got: d.n(),
        });
    }
    Ok(pearson(d.matrix()))
}

/// Ordinary least-squares fit with intercept.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub response_code: String,
    pub predictor_codes: Vec<String>,
    pub row_ids: Vec<String>,
    pub response: DVector<f64>,
    /// Intercept first, then one slope per predictor.
    pub coefficients: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub leverage: DVector<f64>,
    /// RSS / (n - k).
    pub sigma2: f64,
}

impl OlsFit {
    pub fn num_coefficients(&self) -> usize {
        self.coefficients.len()
    }

    pub fn rss(&self) -> f64 {
        self.residuals.norm_squared()
    }

    pub fn r_squared(&self) -> f64 {
        let n = self.response.len() as f64;
        let mean = self.response.sum() / n;
        let tss: f64 = self.response.iter().map(|v| (v - mean).powi(2)).sum();
        1.0 - self.rss() / tss
    }
}

/// OLS of `y` on an intercept plus the columns of `x`.
pub fn ols_matrix(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    response_code: &str,
    predictor_codes: &[String],
    row_ids: &[String],
) -> Result<OlsFit, DiagnosticsError> {
    let n = y.len();
    let k = x.ncols() + 1;
    if n <= k {
        return Err(DiagnosticsError::TooFew {
            what: "observations",
            needed: k + 1,
            got: n,
        });
    }
    let design = with_intercept(x);
    let ls = qr_least_squares(&design, y).ok_or(DiagnosticsError::RankDeficientDesign)?;
    let residuals = y - &ls.fitted;
    let sigma2 = residuals.norm_squared() / (n - k) as f64;
    Ok(OlsFit {
        response_code: response_code.to_string(),
        predictor_codes: predictor_codes.to_vec(),
        row_ids: row_ids.to_vec(),
        response: y.clone(),
        coefficients: ls.coefficients,
        fitted: ls.fitted,
        residuals,
        leverage: ls.leverage,
        sigma2,
    })
}

pub fn ols(
    d: &StandardizedDataset,
    response: &str,
    predictors: &[String],
) -> Result<OlsFit, DiagnosticsError> {
    let y = d.column(response)?;
    let x = d.columns_matrix(predictors)?;
    ols_matrix(&y, &x, response, predictors, d.row_ids())
}

/// VIF_j = 1 / (1 - R²_j) with R²_j from regressing column j of `x` on the
/// remaining columns plus an intercept. Output follows `codes` order.
pub fn vif_matrix(x: &DMatrix<f64>, codes: &[String]) -> Result<Vec<(String, f64)>, DiagnosticsError> {
    let p = x.ncols();
    if p < 2 {
        return Err(DiagnosticsError::TooFew {
            what: "predictors",
            needed: 2,
            got: p,
        });
    }
    assert_eq!(codes.len(), p, "one code per column");
    (0..p)
        .into_par_iter()
        .map(|j| {
            let y = x.column(j).into_owned();
            let others = x.clone().remove_column(j);
            let fit = ols_matrix(&y, &others, &codes[j], &[], &[])
                .map_err(|_| DiagnosticsError::PerfectCollinearity(codes[j].clone()))?;
            let r2 = fit.r_squared();
            if !(r2 < 1.0 - 1e-12) {
                return Err(DiagnosticsError::PerfectCollinearity(codes[j].clone()));
            }
            Ok((codes[j].clone(), 1.0 / (1.0 - r2)))
        })
        .collect()
}

pub fn vif(
    d: &StandardizedDataset,
    predictors: &[String],
) -> Result<Vec<(String, f64)>, DiagnosticsError> {
    vif_matrix(&d.columns_matrix(predictors)?, predictors)
}

/// Cook's distances of one OLS fit and the rows above 4/n.
#[derive(Debug, Clone, Serialize)]
pub struct CooksDistances {
    pub row_ids: Vec<String>,
    pub values: Vec<f64>,
    pub threshold: f64,
    pub influential: Vec<String>,
}

impl CooksDistances {
    pub fn is_influential(&self, i: usize) -> bool {
        self.values[i] > self.threshold
    }
}

/// D_i = r_i² h_i / (k σ² (1 - h_i)²), k counting the intercept.
pub fn cooks_distance(fit: &OlsFit) -> Result<CooksDistances, DiagnosticsError> {
    if !(fit.sigma2 > 0.0) {
        return Err(DiagnosticsError::ZeroResidualVariance);
    }
    let n = fit.residuals.len();
    let k = fit.num_coefficients() as f64;
    let id = |i: usize| fit.row_ids.get(i).cloned().unwrap_or_else(|| i.to_string());
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let h = fit.leverage[i];
        if h >= 1.0 - 1e-12 {
            return Err(DiagnosticsError::LeverageOne(id(i)));
        }
        let r = fit.residuals[i];
        values.push(r * r * h / (k * fit.sigma2 * (1.0 - h).powi(2)));
    }
    let threshold = influence_threshold(n);
    let influential = (0..n).filter(|&i| values[i] > threshold).map(id).collect();
    Ok(CooksDistances {
        row_ids: (0..n).map(id).collect(),
        values,
        threshold,
        influential,
    })
}

/// Conventional Cook's distance cutoff 4/n.
pub fn influence_threshold(n: usize) -> f64 {
    4.0 / n as f64
}

#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub codes: Vec<String>,
    pub correlation: DMatrix<f64>,
    pub vif: Vec<(String, f64)>,
    pub fit: OlsFit,
    pub cooks: CooksDistances,
}

impl DiagnosticsReport {
    pub fn threshold(&self) -> f64 {
        self.cooks.threshold
    }

    pub fn vif_above(&self, cutoff: f64) -> Vec<&str> {
        self.vif
            .iter()
            .filter(|(_, v)| *v > cutoff)
            .map(|(c, _)| c.as_str())
            .collect()
    }

    pub fn write_correlation_csv<W: Write>(&self, out: W) -> Result<(), DiagnosticsError> {
        write_square_csv(out, &self.codes, &self.correlation)
    }

    pub fn write_vif_csv<W: Write>(&self, out: W) -> Result<(), DiagnosticsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["code", "value"])?;
        for (code, v) in &self.vif {
            w.write_record([code.clone(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_cooks_csv<W: Write>(&self, out: W, id_column: &str) -> Result<(), DiagnosticsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([id_column, "value", "influential_flag"])?;
        for (i, id) in self.cooks.row_ids.iter().enumerate() {
            w.write_record([
                id.clone(),
                self.cooks.values[i].to_string(),
                self.cooks.is_influential(i).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Square matrix with a leading `code` column and the codes as header.
pub fn write_square_csv<W: Write>(
    out: W,
    codes: &[String],
    m: &DMatrix<f64>,
) -> Result<(), DiagnosticsError> {
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

/// Correlations of every column, VIFs of `predictors`, and Cook's distances
/// of the OLS regression of `response` on `predictors`.
pub fn diagnose(
    d: &StandardizedDataset,
    response: &str,
    predictors: &[String],
) -> Result<DiagnosticsReport, DiagnosticsError> {
    let correlation = pearson_matrix(d)?;
    let vif = vif(d, predictors)?;
    let fit = ols(d, response, predictors)?;
    let cooks = cooks_distance(&fit)?;
    Ok(DiagnosticsReport {
        codes: d.codes(),
        correlation,
        vif,
        fit,
        cooks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn codes(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn pearson_self_and_negation() {
        let x = random_matrix(12, 1, 1);
        let both = DMatrix::from_columns(&[x.column(0).into_owned(), -x.column(0).into_owned()]);
        let r = pearson(&both);
        assert_eq!(r[(0, 0)], 1.0);
        assert!((r[(0, 1)] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn pearson_matches_covariance_of_z_scores() {
        let x = random_matrix(10, 3, 2);
        let r = pearson(&x);
        // covariance of z-scores, computed entrywise from the definition
        let n = 10.0;
        let z: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                let col: Vec<f64> = x.column(j).iter().copied().collect();
                let m = col.iter().sum::<f64>() / n;
                let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                col.iter().map(|v| (v - m) / sd).collect()
            })
            .collect();
        for a in 0..3 {
            for b in 0..3 {
                let cov: f64 = (0..10).map(|i| z[a][i] * z[b][i]).sum::<f64>() / (n - 1.0);
                assert!((r[(a, b)] - cov).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_linear_fit_has_zero_residuals() {
        let x = random_matrix(8, 2, 3);
        let y = DVector::from_fn(8, |i, _| 1.5 - 2.0 * x[(i, 0)] + 0.25 * x[(i, 1)]);
        let fit = ols_matrix(&y, &x, "y", &codes(2), &[]).unwrap();
        assert!(fit.residuals.amax() < 1e-12);
        assert!((fit.coefficients[1] + 2.0).abs() < 1e-12);
        assert!((fit.leverage.sum() - 3.0).abs() < 1e-8);
    }

    #[test]
    fn centered_response_without_signal() {
        // y is orthogonal to a centered x: slope 0, intercept mean(y)
        let x = DMatrix::from_column_slice(4, 1, &[-1.0, 1.0, -1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0, 3.0, 3.0]);
        let fit = ols_matrix(&y, &x, "y", &codes(1), &[]).unwrap();
        assert!(fit.coefficients[1].abs() < 1e-12);
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_design_errors() {
        let x = random_matrix(6, 1, 4);
        let both = DMatrix::from_columns(&[x.column(0).into_owned(), x.column(0) * 2.0]);
        let y = DVector::from_element(6, 1.0);
        assert!(matches!(
            ols_matrix(&y, &both, "y", &codes(2), &[]),
            Err(DiagnosticsError::RankDeficientDesign)
        ));
        assert!(matches!(
            vif_matrix(&both, &codes(2)),
            Err(DiagnosticsError::PerfectCollinearity(_))
        ));
    }

    #[test]
    fn orthogonal_predictors_have_unit_vif() {
        let x = DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0],
        );
        for (_, v) in vif_matrix(&x, &codes(2)).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cooks_distance_zero_for_perfect_point_and_threshold() {
        assert!((influence_threshold(78) - 0.05128205128205128).abs() < 1e-15);
        let x = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        // residual of the middle point is exactly zero by symmetry
        let y = DVector::from_vec(vec![0.0, 2.0, 2.0, 2.0, 4.0]);
        let fit = ols_matrix(&y, &x, "y", &codes(1), &[]).unwrap();
        let cd = cooks_distance(&fit).unwrap();
        assert!(cd.values[2].abs() < 1e-20);
        assert_eq!(cd.threshold, 0.8);
    }

    #[test]
    fn cooks_distance_leverage_one_errors() {
        // a dummy regressor that singles out one row pins its leverage to 1
        let x = DMatrix::from_row_slice(5, 2, &[0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 1.0]);
        let y = DVector::from_vec(vec![0.1, 0.9, 2.2, 2.8, 7.0]);
        let fit = ols_matrix(&y, &x, "y", &codes(2), &["a", "b", "c", "d", "e"].map(String::from)).unwrap();
        assert!(matches!(cooks_distance(&fit), Err(DiagnosticsError::LeverageOne(id)) if id == "e"));
    }

    #[test]
    fn exports_have_expected_shape() {
        let x = random_matrix(9, 2, 5);
        let y = DVector::from_fn(9, |i, _| x[(i, 0)] + 0.3 * (i as f64).sin());
        let ids: Vec<String> = (0..9).map(|i| format!("C{i}")).collect();
        let fit = ols_matrix(&y, &x, "y", &codes(2), &ids).unwrap();
        let report = DiagnosticsReport {
            codes: codes(2),
            correlation: pearson(&x),
            vif: vif_matrix(&x, &codes(2)).unwrap(),
            cooks: cooks_distance(&fit).unwrap(),
            fit,
        };
        let mut buf = Vec::new();
        report.write_cooks_csv(&mut buf, "iso3").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iso3,value,influential_flag\n"));
        assert_eq!(text.lines().count(), 10);
        let mut buf = Vec::new();
        report.write_correlation_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().next().unwrap(), "code,x0,x1");
    }
}
