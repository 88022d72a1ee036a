//! Stage execution, cached intermediate data and the run manifest.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use qqnet::clustering::{
    adjusted_rand, elbow_scan, kmeans_matrix, pca2, ward_matrix, ClusteringExport, Method,
};
use qqnet::dataset::{complete_cases, load_csv, standardize, StandardizedDataset};
use qqnet::diagnostics::diagnose;
use qqnet::gam::GamOptions;
use qqnet::glasso::{
    default_grid, sample_covariance, select_lambda, write_edge_list, write_graphml, write_selection_csv,
};
use qqnet::qqr::{export_surface, surface_from_dataset, QqrMode, RegionSummary};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::report;

pub const SOFTWARE_VERSION: &str = concat!("qqnet ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.txt";
/// VIF above this marks a variable as collinear in summaries.
pub const VIF_CUTOFF: f64 = 10.0;

const STANDARDIZED_FILE: &str = "standardized.csv";
const MOMENTS_FILE: &str = "standardized_moments.csv";

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot build report: {0}")]
    Report(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Diagnose,
    Cluster,
    Glasso,
    Qqr,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Ingest, Stage::Diagnose, Stage::Cluster, Stage::Glasso, Stage::Qqr];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Diagnose => "diagnose",
            Stage::Cluster => "cluster",
            Stage::Glasso => "glasso",
            Stage::Qqr => "qqr",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    NotRun,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: Option<f64>,
    pub error: Option<String>,
    pub outputs: Vec<String>,
}

impl StageRecord {
    fn not_run(stage: Stage) -> Self {
        Self { stage, status: StageStatus::NotRun, seconds: None, error: None, outputs: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub report: Option<String>,
    /// Every file under the output directory, relative paths, sorted.
    pub inventory: Vec<String>,
}

impl RunManifest {
    fn new(config: &PipelineConfig) -> Self {
        Self {
            software: SOFTWARE_VERSION.into(),
            config: config.clone(),
            stages: Stage::ALL.iter().map(|&s| StageRecord::not_run(s)).collect(),
            report: None,
            inventory: Vec::new(),
        }
    }

    pub fn record(&self, stage: Stage) -> &StageRecord {
        self.stages.iter().find(|r| r.stage == stage).expect("every stage has a record")
    }

    fn record_mut(&mut self, stage: Stage) -> &mut StageRecord {
        self.stages.iter_mut().find(|r| r.stage == stage).expect("every stage has a record")
    }

    pub fn completed(&self, stage: Stage) -> bool {
        self.record(stage).status == StageStatus::Completed
    }

    fn refresh_inventory(&mut self) {
        let mut files: BTreeSet<String> = self
            .stages
            .iter()
            .filter(|r| r.status == StageStatus::Completed)
            .flat_map(|r| r.outputs.iter().cloned())
            .collect();
        files.extend(self.report.iter().cloned());
        files.insert(MANIFEST_FILE.into());
        self.inventory = files.into_iter().collect();
    }

    pub fn load(out_dir: &Path) -> Result<Self, PipelineError> {
        let path = out_dir.join(MANIFEST_FILE);
        let f = File::open(&path)
            .map_err(|e| PipelineError::Report(format!("no manifest at {}: {e}", path.display())))?;
        serde_json::from_reader(BufReader::new(f))
            .map_err(|e| PipelineError::Report(format!("unreadable manifest {}: {e}", path.display())))
    }

    fn save(&mut self, out_dir: &Path) -> Result<(), PipelineError> {
        self.refresh_inventory();
        let path = out_dir.join(MANIFEST_FILE);
        let io = |source| PipelineError::Io { path: path.clone(), source };
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(io)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub input_path: PathBuf,
    pub n_raw: usize,
    pub n_complete: usize,
    pub p: usize,
    pub codes: Vec<String>,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VifEntry {
    pub code: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub response: String,
    pub predictors: Vec<String>,
    pub n: usize,
    pub r_squared: f64,
    pub vif: Vec<VifEntry>,
    pub vif_above_cutoff: Vec<String>,
    pub cooks_threshold: f64,
    pub influential: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub method: Method,
    pub chosen_k: usize,
    pub silhouette: f64,
    pub cluster_sizes: Vec<usize>,
    /// Adjusted Rand index between k-means and Ward at the chosen k.
    pub method_agreement: f64,
    pub pca_variance_explained: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeEdge {
    pub a: String,
    pub b: String,
    pub present: bool,
    pub partial_corr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlassoSummary {
    pub criterion: qqnet::glasso::Criterion,
    pub lambda: f64,
    pub edge_count: usize,
    pub kkt_residual: f64,
    pub outcome_edge: OutcomeEdge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqrSummary {
    pub response: String,
    pub regressor: String,
    pub mode: QqrMode,
    pub grid: String,
    pub shape: (usize, usize),
    pub fitted_cells: usize,
    pub skipped_cells: usize,
    pub regions: RegionSummary,
}

pub fn summary_file(stage: Stage) -> String {
    format!("{}_summary.json", stage.name())
}

/// Files written by one stage; all of them are removed if the stage fails.
struct StageFiles<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl<'a> StageFiles<'a> {
    fn new(dir: &'a Path) -> Self {
        Self { dir, names: Vec::new() }
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, BoxError> {
        let f = File::create(self.dir.join(name))?;
        self.names.push(name.into());
        Ok(BufWriter::new(f))
    }

    fn write_with<E>(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<(), E>) -> Result<(), BoxError>
    where
        E: Into<BoxError>,
    {
        let mut w = self.create(name)?;
        body(&mut w).map_err(Into::into)?;
        w.flush()?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), BoxError> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n").map_err(serde_json::Error::io)
        })
    }

    fn discard(&self) {
        for n in &self.names {
            let _ = fs::remove_file(self.dir.join(n));
        }
    }
}

fn load_cached(cfg: &PipelineConfig, out_dir: &Path) -> Result<StandardizedDataset, BoxError> {
    let table = out_dir.join(STANDARDIZED_FILE);
    let moments = out_dir.join(MOMENTS_FILE);
    if !table.exists() || !moments.exists() {
        return Err(format!("no cached standardized data in {}; run `ingest` first", out_dir.display()).into());
    }
    let d = StandardizedDataset::read_exported(
        BufReader::new(File::open(table)?),
        BufReader::new(File::open(moments)?),
        &cfg.schema()?,
        &cfg.id_column,
    )?;
    Ok(d)
}

fn ingest(cfg: &PipelineConfig, files: &mut StageFiles) -> Result<(), BoxError> {
    let raw = load_csv(&cfg.input_path, &cfg.schema()?, &cfg.id_column)?;
    let complete = complete_cases(&raw)?;
    let d = standardize(&complete)?;
    files.write_with(STANDARDIZED_FILE, |w| d.write_csv(w, &cfg.id_column))?;
    files.write_with(MOMENTS_FILE, |w| d.write_sidecar(w))?;
    let kept: BTreeSet<&String> = complete.row_ids().iter().collect();
    let summary = IngestSummary {
        input_path: cfg.input_path.clone(),
        n_raw: raw.n(),
        n_complete: d.n(),
        p: d.p(),
        codes: d.codes(),
        dropped: raw.row_ids().iter().filter(|r| !kept.contains(r)).cloned().collect(),
    };
    files.json(&summary_file(Stage::Ingest), &summary)
}

fn diagnose_stage(cfg: &PipelineConfig, d: &StandardizedDataset, files: &mut StageFiles) -> Result<(), BoxError> {
    let mut predictors = vec![cfg.outcomes.sdg.clone()];
    predictors.extend(cfg.controls.iter().cloned());
    let rep = diagnose(d, &cfg.outcomes.happiness, &predictors)?;
    files.write_with("correlation.csv", |w| rep.write_correlation_csv(w))?;
    files.write_with("vif.csv", |w| rep.write_vif_csv(w))?;
    files.write_with("cooks_distance.csv", |w| rep.write_cooks_csv(w, &cfg.id_column))?;
    let summary = DiagnosticsSummary {
        response: cfg.outcomes.happiness.clone(),
        predictors,
        n: d.n(),
        r_squared: rep.fit.r_squared(),
        vif: rep.vif.iter().map(|(c, v)| VifEntry { code: c.clone(), value: *v }).collect(),
        vif_above_cutoff: rep.vif_above(VIF_CUTOFF).into_iter().map(String::from).collect(),
        cooks_threshold: rep.threshold(),
        influential: rep.cooks.influential.clone(),
    };
    files.json(&summary_file(Stage::Diagnose), &summary)
}

fn cluster_stage(cfg: &PipelineConfig, d: &StandardizedDataset, files: &mut StageFiles) -> Result<(), BoxError> {
    let c = &cfg.clustering;
    if c.k_max >= d.n() {
        return Err(format!("k_max = {} needs more than {} complete rows", c.k_max, d.n()).into());
    }
    let ks: Vec<usize> = (c.k_min..=c.k_max).collect();
    let x = d.matrix();
    let scan = elbow_scan(x, &ks, c.method, cfg.seed, c.restarts)?;
    let chosen = scan.chosen();
    let km = kmeans_matrix(x, chosen.k, cfg.seed, c.restarts)?;
    let wd = ward_matrix(x, chosen.k)?;
    let pca = pca2(d)?;
    let codes = d.codes();
    let silhouettes = scan.silhouettes();
    let export = ClusteringExport { row_ids: d.row_ids(), codes: &codes, result: chosen, silhouettes: &silhouettes, pca: &pca };
    files.write_with("cluster_assignments.csv", |w| export.write_assignments(w, &cfg.id_column))?;
    files.write_with("cluster_centroids.csv", |w| export.write_centroids(w))?;
    files.write_with("pca_scores.csv", |w| export.write_pca_scores(w, &cfg.id_column))?;
    files.write_with("cluster_scan.csv", |w| export.write_wss_path(w))?;
    let mut sizes = vec![0; chosen.k];
    for &l in &chosen.labels {
        sizes[l] += 1;
    }
    let summary = ClusterSummary {
        method: c.method,
        chosen_k: chosen.k,
        silhouette: chosen.silhouette_mean,
        cluster_sizes: sizes,
        method_agreement: adjusted_rand(&km.labels, &wd.labels),
        pca_variance_explained: pca.variance_explained,
    };
    files.json(&summary_file(Stage::Cluster), &summary)
}

fn glasso_stage(cfg: &PipelineConfig, d: &StandardizedDataset, files: &mut StageFiles) -> Result<(), BoxError> {
    let g = &cfg.glasso;
    let cov = sample_covariance(d)?;
    let grid = default_grid(&cov, g.grid_len);
    let sel = select_lambda(&cov, &grid, g.criterion, g.tol, g.max_iter)?;
    let fit = sel.chosen_fit();
    files.write_with("precision.csv", |w| fit.write_theta_csv(w))?;
    files.write_with("partial_correlation.csv", |w| fit.write_partial_corr_csv(w))?;
    files.write_with("network.graphml", |w| write_graphml(fit, w))?;
    files.write_with("edges.csv", |w| write_edge_list(&fit.edges, w))?;
    files.write_with("lambda_path.csv", |w| write_selection_csv(&sel, w))?;
    let (a, b) = (&cfg.outcomes.happiness, &cfg.outcomes.sdg);
    let ia = fit.codes.iter().position(|c| c == a).ok_or("happiness code missing from network")?;
    let ib = fit.codes.iter().position(|c| c == b).ok_or("sdg code missing from network")?;
    let summary = GlassoSummary {
        criterion: g.criterion,
        lambda: sel.chosen,
        edge_count: fit.edge_count(),
        kkt_residual: fit.kkt_residual,
        outcome_edge: OutcomeEdge {
            a: a.clone(),
            b: b.clone(),
            present: fit.edge(a, b).is_some(),
            partial_corr: fit.partial_corr[(ia, ib)],
        },
    };
    files.json(&summary_file(Stage::Glasso), &summary)
}

fn qqr_stage(cfg: &PipelineConfig, d: &StandardizedDataset, files: &mut StageFiles) -> Result<(), BoxError> {
    let q = &cfg.qqr;
    let grid = q.grid.resolve()?;
    let (y, x) = (&cfg.outcomes.happiness, &cfg.outcomes.sdg);
    let surface = surface_from_dataset(d, y, x, &q.controls, q.mode, &grid, &q.kernel, &GamOptions::default())?;
    let mut csv = files.create("qqr_surface.csv")?;
    let mut manifest = files.create("qqr_surface.json")?;
    export_surface(&surface, &mut csv, &mut manifest)?;
    csv.flush()?;
    manifest.flush()?;
    let summary = QqrSummary {
        response: y.clone(),
        regressor: x.clone(),
        mode: q.mode,
        grid: q.grid.label(),
        shape: grid.shape(),
        fitted_cells: surface.fitted_count(),
        skipped_cells: surface.skipped_cells.len(),
        regions: surface.region_summary(),
    };
    files.json(&summary_file(Stage::Qqr), &summary)
}

fn execute(stage: Stage, cfg: &PipelineConfig, out_dir: &Path, files: &mut StageFiles) -> Result<(), BoxError> {
    if stage == Stage::Ingest {
        return ingest(cfg, files);
    }
    let d = load_cached(cfg, out_dir)?;
    match stage {
        Stage::Ingest => unreachable!(),
        Stage::Diagnose => diagnose_stage(cfg, &d, files),
        Stage::Cluster => cluster_stage(cfg, &d, files),
        Stage::Glasso => glasso_stage(cfg, &d, files),
        Stage::Qqr => qqr_stage(cfg, &d, files),
    }
}

/// Runs `stages` in pipeline order into `cfg.output_dir`, merging with any
/// manifest already there. Validation happens before anything is written.
pub fn run_stages(cfg: &PipelineConfig, stages: &[Stage]) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    if stages.contains(&Stage::Ingest) && !cfg.input_path.is_file() {
        return Err(ConfigError::Invalid(format!("input file {} does not exist", cfg.input_path.display())).into());
    }
    let out_dir = cfg.output_dir.as_path();
    fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io { path: out_dir.into(), source })?;
    let mut manifest = match RunManifest::load(out_dir) {
        Ok(mut m) => {
            m.software = SOFTWARE_VERSION.into();
            m.config = cfg.clone();
            m
        }
        Err(_) => RunManifest::new(cfg),
    };
    if let Some(r) = manifest.report.take() {
        let _ = fs::remove_file(out_dir.join(r));
    }
    let mut order: Vec<Stage> = stages.to_vec();
    order.sort();
    order.dedup();
    for stage in order {
        for old in std::mem::take(&mut manifest.record_mut(stage).outputs) {
            let _ = fs::remove_file(out_dir.join(old));
        }
        let mut files = StageFiles::new(out_dir);
        let start = Instant::now();
        let result = execute(stage, cfg, out_dir, &mut files);
        let rec = manifest.record_mut(stage);
        rec.seconds = Some(start.elapsed().as_secs_f64());
        match result {
            Ok(()) => {
                rec.status = StageStatus::Completed;
                rec.error = None;
                rec.outputs = files.names;
            }
            Err(e) => {
                files.discard();
                rec.status = StageStatus::Failed;
                rec.error = Some(e.to_string());
                manifest.save(out_dir)?;
                return Err(PipelineError::Stage { stage, message: e.to_string() });
            }
        }
    }
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Every stage, then the report.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    run_stages(cfg, &Stage::ALL)?;
    emit_report(&cfg.output_dir)
}

/// Writes `report.txt` from the summaries of completed stages and adds it
/// to the manifest.
pub fn emit_report(out_dir: &Path) -> Result<RunManifest, PipelineError> {
    let mut manifest = RunManifest::load(out_dir)?;
    let text = report::render(&manifest, out_dir)?;
    let path = out_dir.join(REPORT_FILE);
    fs::write(&path, text).map_err(|source| PipelineError::Io { path, source })?;
    manifest.report = Some(REPORT_FILE.into());
    manifest.save(out_dir)?;
    Ok(manifest)
}
