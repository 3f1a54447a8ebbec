//! `grvrank` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grvrank::pipeline::{Pipeline, PipelineConfig, Stage};
use grvrank::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "grvrank",
    version,
    about = "Item timeliness modeling and timeliness-aware reranking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(Common),
    /// Build timelines and deactivation labels.
    Label(Common),
    /// Fit the Cox model.
    Fit(Common),
    /// Predict GRV curves for every item.
    Predict(Common),
    /// Score and rerank evaluation requests.
    Rerank(Common),
    /// Compute metrics and reports.
    Eval(Common),
    /// Run every stage in order.
    RunAll(Common),
    /// Sweep gamma and select it on validation.
    GridSearch(Common),
    /// Print the effective configuration as JSON.
    Config(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Proceed even if upstream artifacts came from a different configuration.
    #[arg(long)]
    force: bool,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// grv, upload_time or none.
    #[arg(long)]
    timeliness: Option<String>,
    #[arg(long)]
    impressions: Option<PathBuf>,
    #[arg(long)]
    items: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.paths.output_dir = out.clone();
        }
        if let Some(g) = self.gamma {
            cfg.aggregation.gamma = g;
        }
        if let Some(t) = &self.timeliness {
            cfg.aggregation.timeliness_source =
                serde_json::from_value(serde_json::Value::String(t.clone())).map_err(|_| {
                    Error::InvalidConfig(format!("unknown timeliness source `{t}`"))
                })?;
        }
        if self.impressions.is_some() {
            cfg.paths.impressions = self.impressions.clone();
        }
        if self.items.is_some() {
            cfg.paths.items = self.items.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (common, stage) = match &cli.command {
        Command::Synth(c) => (c, Some(Stage::Synth)),
        Command::Label(c) => (c, Some(Stage::Label)),
        Command::Fit(c) => (c, Some(Stage::Fit)),
        Command::Predict(c) => (c, Some(Stage::Predict)),
        Command::Rerank(c) => (c, Some(Stage::Rerank)),
        Command::Eval(c) => (c, Some(Stage::Eval)),
        Command::GridSearch(c) => (c, Some(Stage::GridSearch)),
        Command::RunAll(c) | Command::Config(c) => (c, None),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let cfg = common.config()?;
    if let Command::Config(_) = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let pipeline = Pipeline::new(cfg, common.force)?;
    match stage {
        Some(s) => pipeline.run(s),
        None => pipeline.run_all(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e);
            ExitCode::FAILURE
        }
    }
}
