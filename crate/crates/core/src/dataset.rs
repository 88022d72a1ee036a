//! Country-level tables: schema, CSV ingest, complete-case filtering and
//! column standardization.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default name of the country identifier column.
pub const DEFAULT_ID_COLUMN: &str = "iso3";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("column `{0}` is missing from the input header")]
    MissingColumn(String),
    #[error("country `{0}` appears more than once")]
    DuplicateCountry(String),
    #[error("input file has no header or no data rows")]
    EmptyFile,
    #[error("no row is complete across all schema columns")]
    AllRowsDropped,
    #[error("column `{0}` has zero variance")]
    ZeroVarianceColumn(String),
    #[error("column `{0}` contains missing values")]
    MissingValues(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("unknown variable code `{0}`")]
    UnknownCode(String),
    #[error("malformed sidecar: {0}")]
    MalformedSidecar(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    OutcomeHappiness,
    OutcomeSdg,
    Control,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub code: String,
    pub long_name: String,
    pub source: String,
    pub role: Role,
}

impl VariableSpec {
    pub fn new(code: &str, long_name: &str, source: &str, role: Role) -> Self {
        Self {
            code: code.to_string(),
            long_name: long_name.to_string(),
            source: source.to_string(),
            role,
        }
    }
}

/// Ordered list of variables with unique codes and exactly one variable of
/// each outcome role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<VariableSpec>", into = "Vec<VariableSpec>")]
pub struct Schema {
    vars: Vec<VariableSpec>,
}

impl Schema {
    pub fn new(vars: Vec<VariableSpec>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for v in &vars {
            if v.code.is_empty() {
                return Err(DatasetError::InvalidSchema("empty variable code".into()));
            }
            if !seen.insert(v.code.as_str()) {
                return Err(DatasetError::InvalidSchema(format!(
                    "duplicate code `{}`",
                    v.code
                )));
            }
        }
        for role in [Role::OutcomeHappiness, Role::OutcomeSdg] {
            let count = vars.iter().filter(|v| v.role == role).count();
            if count != 1 {
                return Err(DatasetError::InvalidSchema(format!(
                    "expected exactly one {role:?} variable, found {count}"
                )));
            }
        }
        Ok(Self { vars })
    }

    /// The fourteen-variable country panel: two outcomes, five economic and
    /// demographic controls, six governance indicators and competitiveness.
    pub fn country_panel() -> Self {
        use Role::*;
        let wdi = "World Bank WDI";
        let wgi = "World Bank WGI";
        let vars = vec![
            VariableSpec::new("Happiness", "Happiness (Cantril ladder)", "World Happiness Report", OutcomeHappiness),
            VariableSpec::new("SDG", "SDG Index", "sdgindex.org", OutcomeSdg),
            VariableSpec::new("GDPpc", "GDP per capita (log, constant 2015 USD)", wdi, Control),
            VariableSpec::new("DCPS", "Domestic credit to the private sector", wdi, Control),
            VariableSpec::new("LE", "Life expectancy at birth", wdi, Control),
            VariableSpec::new("UnEmp", "Unemployment rate", wdi, Control),
            VariableSpec::new("IEF", "Index of Economic Freedom", "heritage.org", Control),
            VariableSpec::new("CC", "Control of Corruption", wgi, Control),
            VariableSpec::new("GE", "Government Effectiveness", wgi, Control),
            VariableSpec::new("PS", "Political Stability and Absence of Violence/Terrorism", wgi, Control),
            VariableSpec::new("RQ", "Regulatory Quality", wgi, Control),
            VariableSpec::new("RL", "Rule of Law", wgi, Control),
            VariableSpec::new("VA", "Voice and Accountability", wgi, Control),
            VariableSpec::new("GCI", "Global Competitiveness Index", "World Bank Group", Control),
        ];
        Self::new(vars).expect("built-in schema is valid")
    }

    pub fn vars(&self) -> &[VariableSpec] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn codes(&self) -> Vec<String> {
        self.vars.iter().map(|v| v.code.clone()).collect()
    }

    pub fn get(&self, code: &str) -> Option<&VariableSpec> {
        self.vars.iter().find(|v| v.code == code)
    }

    pub fn code_for(&self, role: Role) -> &str {
        &self
            .vars
            .iter()
            .find(|v| v.role == role)
            .expect("schema validated")
            .code
    }

    pub fn controls(&self) -> Vec<String> {
        self.vars
            .iter()
            .filter(|v| v.role == Role::Control)
            .map(|v| v.code.clone())
            .collect()
    }
}

impl TryFrom<Vec<VariableSpec>> for Schema {
    type Error = DatasetError;
    fn try_from(vars: Vec<VariableSpec>) -> Result<Self, Self::Error> {
        Schema::new(vars)
    }
}

impl From<Schema> for Vec<VariableSpec> {
    fn from(s: Schema) -> Self {
        s.vars
    }
}

/// Rectangular table of country rows over the schema columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    row_ids: Vec<String>,
    columns: Vec<VariableSpec>,
    values: DMatrix<f64>,
    missing: DMatrix<bool>,
}

impl Dataset {
    pub fn new(
        row_ids: Vec<String>,
        columns: Vec<VariableSpec>,
        values: DMatrix<f64>,
        missing: DMatrix<bool>,
    ) -> Result<Self, DatasetError> {
        if values.nrows() != row_ids.len() || values.ncols() != columns.len() {
            return Err(DatasetError::InvalidSchema(format!(
                "values are {}x{} but there are {} rows and {} columns",
                values.nrows(),
                values.ncols(),
                row_ids.len(),
                columns.len()
            )));
        }
        if missing.shape() != values.shape() {
            return Err(DatasetError::InvalidSchema(
                "missing mask shape differs from values".into(),
            ));
        }
        let mut seen = HashSet::new();
        for id in &row_ids {
            if !seen.insert(id.as_str()) {
                return Err(DatasetError::DuplicateCountry(id.clone()));
            }
        }
        Ok(Self {
            row_ids,
            columns,
            values,
            missing,
        })
    }

    /// Fully observed dataset built from a value matrix.
    pub fn from_complete(
        row_ids: Vec<String>,
        columns: Vec<VariableSpec>,
        values: DMatrix<f64>,
    ) -> Result<Self, DatasetError> {
        let missing = DMatrix::from_element(values.nrows(), values.ncols(), false);
        Self::new(row_ids, columns, values, missing)
    }

    pub fn n(&self) -> usize {
        self.row_ids.len()
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn columns(&self) -> &[VariableSpec] {
        &self.columns
    }

    pub fn codes(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.code.clone()).collect()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn missing_mask(&self) -> &DMatrix<bool> {
        &self.missing
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[(row, col)]
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    pub fn index_of(&self, code: &str) -> Result<usize, DatasetError> {
        self.columns
            .iter()
            .position(|c| c.code == code)
            .ok_or_else(|| DatasetError::UnknownCode(code.to_string()))
    }

    /// Keep only the given rows, in the given order.
    fn select_rows(&self, rows: &[usize]) -> Self {
        let values = self.values.select_rows(rows);
        let missing = self.missing.select_rows(rows);
        let row_ids = rows.iter().map(|&i| self.row_ids[i].clone()).collect();
        Self {
            row_ids,
            columns: self.columns.clone(),
            values,
            missing,
        }
    }
}

fn is_missing_token(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

/// Read a country table from `reader`. Columns not named in the schema are
/// ignored; empty, `NA`, `NaN` and unparsable cells are marked missing.
pub fn read_csv<R: Read>(
    reader: R,
    schema: &Schema,
    id_column: &str,
) -> Result<Dataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(DatasetError::EmptyFile);
    }
    let find = |name: &str| headers.iter().position(|h| h == name);
    let id_idx = find(id_column).ok_or_else(|| DatasetError::MissingColumn(id_column.into()))?;
    let col_idx = schema
        .vars()
        .iter()
        .map(|v| find(&v.code).ok_or_else(|| DatasetError::MissingColumn(v.code.clone())))
        .collect::<Result<Vec<_>, _>>()?;

    let p = schema.len();
    let mut row_ids = Vec::new();
    let mut flat = Vec::new();
    let mut mask = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record?;
        let id = record.get(id_idx).unwrap_or("").to_string();
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateCountry(id));
        }
        row_ids.push(id);
        for &j in &col_idx {
            let cell = record.get(j).unwrap_or("");
            let parsed = if is_missing_token(cell) {
                None
            } else {
                cell.parse::<f64>().ok().filter(|v| v.is_finite())
            };
            flat.push(parsed.unwrap_or(f64::NAN));
            mask.push(parsed.is_none());
        }
    }
    if row_ids.is_empty() {
        return Err(DatasetError::EmptyFile);
    }
    let n = row_ids.len();
    let values = DMatrix::from_row_slice(n, p, &flat);
    let missing = DMatrix::from_row_slice(n, p, &mask);
    Dataset::new(row_ids, schema.vars().to_vec(), values, missing)
}

pub fn load_csv(path: &Path, schema: &Schema, id_column: &str) -> Result<Dataset, DatasetError> {
    let file = File::open(path)?;
    if file.metadata()?.len() == 0 {
        return Err(DatasetError::EmptyFile);
    }
    read_csv(file, schema, id_column)
}

/// Rows without any missing cell, in their original order.
pub fn complete_cases(d: &Dataset) -> Result<Dataset, DatasetError> {
    let keep: Vec<usize> = (0..d.n())
        .filter(|&i| (0..d.p()).all(|j| !d.missing[(i, j)]))
        .collect();
    if keep.is_empty() {
        return Err(DatasetError::AllRowsDropped);
    }
    Ok(d.select_rows(&keep))
}

/// Complete-case data together with its column z-scores.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedDataset {
    base: Dataset,
    means: DVector<f64>,
    sds: DVector<f64>,
    z: DMatrix<f64>,
}

/// Column z-scores with sample (n-1) standard deviations.
pub fn standardize(d: &Dataset) -> Result<StandardizedDataset, DatasetError> {
    if let Some(j) = (0..d.p()).find(|&j| d.missing.column(j).iter().any(|&m| m)) {
        return Err(DatasetError::MissingValues(d.columns[j].code.clone()));
    }
    let n = d.n();
    if n < 2 {
        return Err(DatasetError::ZeroVarianceColumn(
            d.columns.first().map(|c| c.code.clone()).unwrap_or_default(),
        ));
    }
    let p = d.p();
    let mut means = DVector::zeros(p);
    let mut sds = DVector::zeros(p);
    let mut z = d.values.clone();
    for j in 0..p {
        let col = d.values.column(j);
        let mean = col.sum() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        let scale = col.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        if !(sd > 1e-14 * scale) {
            return Err(DatasetError::ZeroVarianceColumn(d.columns[j].code.clone()));
        }
        means[j] = mean;
        sds[j] = sd;
        for v in z.column_mut(j).iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    Ok(StandardizedDataset {
        base: d.clone(),
        means,
        sds,
        z,
    })
}

impl StandardizedDataset {
    /// Rebuild from previously exported z-scores and their moments.
    pub fn from_parts(
        row_ids: Vec<String>,
        columns: Vec<VariableSpec>,
        z: DMatrix<f64>,
        means: DVector<f64>,
        sds: DVector<f64>,
    ) -> Result<Self, DatasetError> {
        if means.len() != z.ncols() || sds.len() != z.ncols() {
            return Err(DatasetError::MalformedSidecar(
                "moment vectors do not match the column count".into(),
            ));
        }
        let mut raw = z.clone();
        for j in 0..raw.ncols() {
            for v in raw.column_mut(j).iter_mut() {
                *v = *v * sds[j] + means[j];
            }
        }
        let base = Dataset::from_complete(row_ids, columns, raw)?;
        Ok(Self { base, means, sds, z })
    }

    pub fn base(&self) -> &Dataset {
        &self.base
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn p(&self) -> usize {
        self.base.p()
    }

    pub fn row_ids(&self) -> &[String] {
        self.base.row_ids()
    }

    pub fn columns(&self) -> &[VariableSpec] {
        self.base.columns()
    }

    pub fn codes(&self) -> Vec<String> {
        self.base.codes()
    }

    pub fn means(&self) -> &DVector<f64> {
        &self.means
    }

    pub fn sds(&self) -> &DVector<f64> {
        &self.sds
    }

    /// Standardized values, n x p.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn index_of(&self, code: &str) -> Result<usize, DatasetError> {
        self.base.index_of(code)
    }

    pub fn column(&self, code: &str) -> Result<DVector<f64>, DatasetError> {
        Ok(self.z.column(self.index_of(code)?).into_owned())
    }

    /// Standardized columns for `codes`, in that order.
    pub fn columns_matrix(&self, codes: &[String]) -> Result<DMatrix<f64>, DatasetError> {
        let idx = codes
            .iter()
            .map(|c| self.index_of(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.z.select_columns(&idx))
    }

    /// Map z-scores back to the original scale.
    pub fn unstandardize(&self) -> DMatrix<f64> {
        let mut out = self.z.clone();
        for j in 0..out.ncols() {
            for v in out.column_mut(j).iter_mut() {
                *v = *v * self.sds[j] + self.means[j];
            }
        }
        out
    }

    /// Treat the z-scores as raw data and standardize them again.
    pub fn restandardize(&self) -> Result<StandardizedDataset, DatasetError> {
        let d = Dataset::from_complete(
            self.row_ids().to_vec(),
            self.columns().to_vec(),
            self.z.clone(),
        )?;
        standardize(&d)
    }

    /// Standardized table: the id column followed by every schema code.
    pub fn write_csv<W: Write>(&self, out: W, id_column: &str) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![id_column.to_string()];
        header.extend(self.codes());
        w.write_record(&header)?;
        for (i, id) in self.row_ids().iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.z.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Two data rows, `mean` and `sd`, under a `stat,<codes>` header.
    pub fn write_sidecar<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["stat".to_string()];
        header.extend(self.codes());
        w.write_record(&header)?;
        for (label, v) in [("mean", &self.means), ("sd", &self.sds)] {
            let mut rec = vec![label.to_string()];
            rec.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`write_csv`](Self::write_csv) plus [`write_sidecar`](Self::write_sidecar).
    pub fn read_exported<R1: Read, R2: Read>(
        table: R1,
        sidecar: R2,
        schema: &Schema,
        id_column: &str,
    ) -> Result<Self, DatasetError> {
        let d = read_csv(table, schema, id_column)?;
        if let Some((_, j)) = (0..d.n())
            .flat_map(|i| (0..d.p()).map(move |j| (i, j)))
            .find(|&(i, j)| d.is_missing(i, j))
        {
            return Err(DatasetError::MissingValues(d.columns[j].code.clone()));
        }
        let mut rdr = csv::Reader::from_reader(sidecar);
        let headers = rdr.headers()?.clone();
        let col_idx = schema
            .vars()
            .iter()
            .map(|v| {
                headers
                    .iter()
                    .position(|h| h == v.code)
                    .ok_or_else(|| DatasetError::MissingColumn(v.code.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut means = None;
        let mut sds = None;
        for rec in rdr.records() {
            let rec = rec?;
            let parsed = col_idx
                .iter()
                .map(|&j| {
                    rec.get(j)
                        .and_then(|c| c.parse::<f64>().ok())
                        .ok_or_else(|| DatasetError::MalformedSidecar(format!("bad cell in column {j}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            match rec.get(0) {
                Some("mean") => means = Some(DVector::from_vec(parsed)),
                Some("sd") => sds = Some(DVector::from_vec(parsed)),
                other => {
                    return Err(DatasetError::MalformedSidecar(format!(
                        "unexpected row label {other:?}"
                    )))
                }
            }
        }
        let means = means.ok_or_else(|| DatasetError::MalformedSidecar("no mean row".into()))?;
        let sds = sds.ok_or_else(|| DatasetError::MalformedSidecar("no sd row".into()))?;
        Self::from_parts(
            d.row_ids.clone(),
            d.columns.clone(),
            d.values.clone(),
            means,
            sds,
        )
    }
}
