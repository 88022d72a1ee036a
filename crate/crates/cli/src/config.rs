//! Declarative run configuration, read from one JSON file and validated
//! before anything is computed or written.

use std::path::{Path, PathBuf};

use qqnet::clustering::Method;
use qqnet::dataset::{Schema, DEFAULT_ID_COLUMN};
use qqnet::glasso::{Criterion, DEFAULT_GRID_LEN, DEFAULT_MAX_ITER, DEFAULT_TOL};
use qqnet::qqr::{GridAxis, KernelSpec, QqrMode, QuantileGrid};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides `output_dir` when set; `--out` still wins.
pub const OUT_DIR_ENV: &str = "QQNET_OUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outcomes {
    pub happiness: String,
    pub sdg: String,
}

impl Default for Outcomes {
    fn default() -> Self {
        Self { happiness: "Happiness".into(), sdg: "SDG".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    Central,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridChoice {
    Preset(GridPreset),
    Custom { tau: GridAxis, theta: GridAxis },
}

impl GridChoice {
    pub fn resolve(&self) -> Result<QuantileGrid, ConfigError> {
        match self {
            GridChoice::Preset(GridPreset::Central) => Ok(QuantileGrid::central()),
            GridChoice::Preset(GridPreset::Fine) => Ok(QuantileGrid::fine()),
            GridChoice::Custom { tau, theta } => {
                QuantileGrid::from_axes(*tau, *theta).map_err(|e| ConfigError::Invalid(e.to_string()))
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            GridChoice::Preset(GridPreset::Central) => "central".into(),
            GridChoice::Preset(GridPreset::Fine) => "fine".into(),
            GridChoice::Custom { .. } => "custom".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QqrConfig {
    pub grid: GridChoice,
    pub kernel: KernelSpec,
    pub mode: QqrMode,
    /// Controls used by the local regressions (or partialled out in
    /// residual mode).
    pub controls: Vec<String>,
}

impl Default for QqrConfig {
    fn default() -> Self {
        Self {
            grid: GridChoice::Preset(GridPreset::Central),
            kernel: KernelSpec::default(),
            mode: QqrMode::Controls,
            controls: vec!["GDPpc".into(), "LE".into(), "GE".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlassoConfig {
    pub grid_len: usize,
    pub criterion: Criterion,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GlassoConfig {
    fn default() -> Self {
        Self {
            grid_len: DEFAULT_GRID_LEN,
            criterion: Criterion::Bic,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringConfig {
    pub method: Method,
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self { method: Method::KMeans, k_min: 2, k_max: 8, restarts: 10 }
    }
}

fn default_id_column() -> String {
    DEFAULT_ID_COLUMN.into()
}

fn default_controls() -> Vec<String> {
    Schema::country_panel().controls()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("qqnet-out")
}

fn default_seed() -> u64 {
    20220101
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub input_path: PathBuf,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default)]
    pub outcomes: Outcomes,
    #[serde(default = "default_controls")]
    pub controls: Vec<String>,
    #[serde(default)]
    pub qqr: QqrConfig,
    #[serde(default)]
    pub glasso: GlassoConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl PipelineConfig {
    /// A configuration with every default filled in.
    pub fn with_input(input_path: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            input_path: input_path.into(),
            id_column: default_id_column(),
            outcomes: Outcomes::default(),
            controls: default_controls(),
            qqr: QqrConfig::default(),
            glasso: GlassoConfig::default(),
            clustering: ClusteringConfig::default(),
            output_dir: default_output_dir(),
            seed: default_seed(),
        }
    }

    /// Parses a config file. Relative paths inside it are taken relative to
    /// the file's directory. The result is not yet validated.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.input_path.is_relative() {
            cfg.input_path = base.join(&cfg.input_path);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Every code the pipeline analyses: both outcomes, then the controls.
    pub fn analysis_codes(&self) -> Vec<String> {
        let mut v = vec![self.outcomes.happiness.clone(), self.outcomes.sdg.clone()];
        v.extend(self.controls.iter().cloned());
        v
    }

    /// Schema restricted to the analysed variables, in analysis order.
    pub fn schema(&self) -> Result<Schema, ConfigError> {
        let panel = Schema::country_panel();
        let vars = self
            .analysis_codes()
            .iter()
            .map(|c| {
                panel
                    .get(c)
                    .cloned()
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown variable code `{c}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Schema::new(vars).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.input_path.as_os_str().is_empty() {
            return bad("input_path is empty".into());
        }
        if self.id_column.trim().is_empty() {
            return bad("id_column is empty".into());
        }
        let panel = Schema::country_panel();
        let known = |c: &String| panel.get(c).is_some();
        if self.outcomes.happiness == self.outcomes.sdg {
            return bad("happiness and sdg outcomes must differ".into());
        }
        for c in self.analysis_codes().iter().chain(&self.qqr.controls) {
            if !known(c) {
                return bad(format!("unknown variable code `{c}`"));
            }
        }
        for c in &self.controls {
            if *c == self.outcomes.happiness || *c == self.outcomes.sdg {
                return bad(format!("`{c}` is an outcome and cannot also be a control"));
            }
        }
        for c in &self.qqr.controls {
            if !self.controls.contains(c) {
                return bad(format!("qqr control `{c}` is not among the configured controls"));
            }
        }
        // rejects duplicates
        self.schema()?;
        self.qqr.grid.resolve()?;
        self.qqr.kernel.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let g = &self.glasso;
        if g.grid_len < 2 {
            return bad("glasso.grid_len must be at least 2".into());
        }
        if g.tol.is_nan() || g.tol <= 0.0 || g.max_iter == 0 {
            return bad("glasso.tol must be positive and glasso.max_iter at least 1".into());
        }
        if let Criterion::Ebic { gamma } = g.criterion {
            if !(0.0..=1.0).contains(&gamma) {
                return bad(format!("EBIC gamma must lie in [0, 1], got {gamma}"));
            }
        }
        let c = &self.clustering;
        if c.k_min < 2 || c.k_max < c.k_min {
            return bad(format!("clustering k range {}..={} is invalid", c.k_min, c.k_max));
        }
        if c.restarts == 0 {
            return bad("clustering.restarts must be at least 1".into());
        }
        Ok(())
    }
}
