//! Plain-text run report assembled from the per-stage summaries.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::pipeline::{
    summary_file, ClusterSummary, DiagnosticsSummary, GlassoSummary, IngestSummary, PipelineError, QqrSummary,
    RunManifest, Stage, VIF_CUTOFF,
};

fn read_summary<T: DeserializeOwned>(out_dir: &Path, stage: Stage) -> Result<T, PipelineError> {
    let path = out_dir.join(summary_file(stage));
    let f = File::open(&path).map_err(|e| PipelineError::Report(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| PipelineError::Report(format!("{}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:+.4}"))
}

fn list_or_none(items: &[String]) -> String {
    if items.is_empty() {
        "none".into()
    } else {
        items.join(", ")
    }
}

pub fn render(manifest: &RunManifest, out_dir: &Path) -> Result<String, PipelineError> {
    if !Stage::ALL.iter().any(|&s| manifest.completed(s)) {
        return Err(PipelineError::Report("no stage has completed".into()));
    }
    let mut r = String::new();
    let mut line = |s: String| {
        r.push_str(&s);
        r.push('\n');
    };
    line(format!("qqnet report ({})", manifest.software));
    line(format!("seed: {}", manifest.config.seed));

    if manifest.completed(Stage::Ingest) {
        let s: IngestSummary = read_summary(out_dir, Stage::Ingest)?;
        line(String::new());
        line("== Dataset ==".into());
        line(format!("input: {}", s.input_path.display()));
        line(format!("rows read: {}, complete cases: {}, variables: {}", s.n_raw, s.n_complete, s.p));
        line(format!("dropped ({}): {}", s.dropped.len(), list_or_none(&s.dropped)));
        line(format!("variables: {}", s.codes.join(", ")));
    }

    if manifest.completed(Stage::Diagnose) {
        let s: DiagnosticsSummary = read_summary(out_dir, Stage::Diagnose)?;
        line(String::new());
        line("== Diagnostics ==".into());
        line(format!(
            "OLS of {} on {} predictors, n = {}: R^2 = {:.4}",
            s.response,
            s.predictors.len(),
            s.n,
            s.r_squared
        ));
        line("variance inflation factors:".into());
        let width = s.vif.iter().map(|v| v.code.len()).max().unwrap_or(0);
        for v in &s.vif {
            let flag = if v.value > VIF_CUTOFF { "  > 10" } else { "" };
            line(format!("  {:<width$}  {:>10.3}{flag}", v.code, v.value));
        }
        line(format!("above {VIF_CUTOFF}: {}", list_or_none(&s.vif_above_cutoff)));
        line(format!(
            "influential cases (Cook's D > 4/n = {:.4}): {}",
            s.cooks_threshold,
            list_or_none(&s.influential)
        ));
    }

    if manifest.completed(Stage::Cluster) {
        let s: ClusterSummary = read_summary(out_dir, Stage::Cluster)?;
        let method = serde_json::to_value(s.method).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        line(String::new());
        line("== Clustering ==".into());
        line(format!("method: {method}, chosen k = {} (silhouette {:.4})", s.chosen_k, s.silhouette));
        let sizes: Vec<String> = s.cluster_sizes.iter().map(|n| n.to_string()).collect();
        line(format!("cluster sizes: {}", sizes.join(", ")));
        line(format!("k-means vs Ward adjusted Rand index: {:.4}", s.method_agreement));
        line(format!(
            "PCA variance explained: {:.4}, {:.4}",
            s.pca_variance_explained[0], s.pca_variance_explained[1]
        ));
    }

    if manifest.completed(Stage::Glasso) {
        let s: GlassoSummary = read_summary(out_dir, Stage::Glasso)?;
        let e = &s.outcome_edge;
        line(String::new());
        line("== Network ==".into());
        line(format!("selected lambda = {:.6}, edges = {}, KKT residual = {:.2e}", s.lambda, s.edge_count, s.kkt_residual));
        line(format!(
            "{}-{} edge: {}, partial correlation {:.4}",
            e.a,
            e.b,
            if e.present { "present" } else { "absent" },
            e.partial_corr
        ));
    }

    if manifest.completed(Stage::Qqr) {
        let s: QqrSummary = read_summary(out_dir, Stage::Qqr)?;
        let mode = match s.mode {
            qqnet::qqr::QqrMode::Controls => "controls",
            qqnet::qqr::QqrMode::Residuals => "residuals",
        };
        line(String::new());
        line("== Quantile-on-quantile ==".into());
        line(format!(
            "{} on {} ({mode} mode), {} grid {}x{}: {} cells fitted, {} skipped",
            s.response, s.regressor, s.grid, s.shape.0, s.shape.1, s.fitted_cells, s.skipped_cells
        ));
        line("mean beta by region (tau = response quantile, theta = regressor quantile):".into());
        for (name, v) in s.regions.entries() {
            line(format!("  {name:<20} {}", fmt_opt(v)));
        }
    }
    Ok(r)
}
