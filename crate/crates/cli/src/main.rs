use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qqnet::qqr::QqrMode;
use qqnet_cli::config::{ConfigError, GridChoice, GridPreset, PipelineConfig, OUT_DIR_ENV};
use qqnet_cli::pipeline::{emit_report, run_pipeline, run_stages, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "qqnet", version, about = "Happiness and sustainability network analysis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the environment and the config.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Quantile grid preset for the qqr stage.
    #[arg(long, global = true)]
    grid: Option<GridArg>,
    /// How controls enter the qqr stage.
    #[arg(long, global = true)]
    mode: Option<ModeArg>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Read, filter to complete cases and standardize the input panel.
    Ingest,
    /// Correlations, VIFs and Cook's distances.
    Diagnose,
    /// k-means or Ward clustering with an elbow scan and PCA scores.
    Cluster,
    /// Graphical lasso network with penalty selection.
    Glasso,
    /// Quantile-on-quantile surface.
    Qqr,
    /// Every stage, then the report.
    Run,
    /// Rebuild the report from completed stages.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Central,
    Fine,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Controls,
    Residuals,
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig, ConfigError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(g) = cli.grid {
        cfg.qqr.grid = GridChoice::Preset(match g {
            GridArg::Central => GridPreset::Central,
            GridArg::Fine => GridPreset::Fine,
        });
    }
    if let Some(m) = cli.mode {
        cfg.qqr.mode = match m {
            ModeArg::Controls => QqrMode::Controls,
            ModeArg::Residuals => QqrMode::Residuals,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<PathBuf, PipelineError> {
    if let Command::Report = cli.command {
        let out = match &cli.out {
            Some(out) => out.clone(),
            None => resolve_config(cli)?.output_dir,
        };
        emit_report(&out)?;
        return Ok(out);
    }
    let cfg = resolve_config(cli)?;
    let stage = match cli.command {
        Command::Run => {
            run_pipeline(&cfg)?;
            return Ok(cfg.output_dir);
        }
        Command::Ingest => Stage::Ingest,
        Command::Diagnose => Stage::Diagnose,
        Command::Cluster => Stage::Cluster,
        Command::Glasso => Stage::Glasso,
        Command::Qqr => Stage::Qqr,
        Command::Report => unreachable!(),
    };
    run_stages(&cfg, &[stage])?;
    Ok(cfg.output_dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(out) => {
            eprintln!("outputs written to {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
