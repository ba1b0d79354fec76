use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cradl_core::config::{ExperimentConfig, Source, OUTPUT_ROOT_ENV};
use cradl_core::io::pgm::export_heatmap_image;
use cradl_core::io::read_tensor;
use cradl_core::pipeline::{self, DensityFamily, Layout, TrainStage};

/// Contrastive-representation anomaly detection on synthetic brain slices.
#[derive(Parser)]
#[command(name = "cradl", version)]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root, overriding `output_dir` from the config.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic splits.
    Generate {
        #[arg(long)]
        force: bool,
    },
    /// Train the contrastive encoder or a VAE baseline.
    Train {
        /// simclr, vae or cevae.
        #[arg(long)]
        stage: TrainStage,
        /// Single seed; every configured seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Fit GMMs and the flow on a trained model's representations.
    Fit {
        /// Representation source: cradl, vae or cevae.
        #[arg(long)]
        stage: Source,
        /// Only `gmm` (every K) or only `flow`.
        #[arg(long)]
        density: Option<DensityFamily>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Write per-slice detection scores of every candidate scorer.
    Score {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Select scorers on validation, report test metrics and export heatmaps.
    Evaluate {
        #[arg(long)]
        force: bool,
    },
    /// Convert a CRTF heatmap to an 8-bit PGM image.
    Export { input: PathBuf, output: PathBuf },
    /// Generate, train, fit and evaluate in one go.
    Run {
        #[arg(long)]
        force: bool,
    },
}

fn seeds(cfg: &ExperimentConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn sources(cfg: &ExperimentConfig) -> Vec<Source> {
    let mut s = vec![Source::Cradl];
    if cfg.methods.vae {
        s.push(Source::Vae);
    }
    if cfg.methods.cevae {
        s.push(Source::Cevae);
    }
    s
}

fn run_all(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<()> {
    pipeline::generate(cfg, layout, force)?;
    for &seed in &cfg.seeds {
        for source in sources(cfg) {
            let stage = match source {
                Source::Cradl => TrainStage::Simclr,
                Source::Vae => TrainStage::Vae,
                Source::Cevae => TrainStage::Cevae,
            };
            eprintln!("seed {seed}: training {}", stage.name());
            pipeline::train(cfg, layout, stage, seed, force)?;
            if source == Source::Cradl || cfg.methods.radl {
                eprintln!("seed {seed}: fitting densities on {source}");
                pipeline::fit(cfg, layout, source, seed, None, force)?;
            }
        }
    }
    let report = pipeline::evaluate(cfg, layout, force)?;
    print!("{}", report.table);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    let layout = Layout::new(cli.output.clone().unwrap_or_else(|| cfg.output_root()));
    match cli.command {
        Command::Generate { force } => {
            let dir = pipeline::generate(&cfg, &layout, force)?;
            println!("{}", dir.display());
        }
        Command::Train { stage, seed, force } => {
            for s in seeds(&cfg, seed) {
                let dir = pipeline::train(&cfg, &layout, stage, s, force)?;
                println!("{}", dir.display());
            }
        }
        Command::Fit {
            stage,
            density,
            seed,
            force,
        } => {
            for s in seeds(&cfg, seed) {
                for dir in pipeline::fit(&cfg, &layout, stage, s, density, force)? {
                    println!("{}", dir.display());
                }
            }
        }
        Command::Score { seed, force } => {
            for s in seeds(&cfg, seed) {
                let dir = pipeline::score(&cfg, &layout, s, force)?;
                println!("{}", dir.display());
            }
        }
        Command::Evaluate { force } => {
            let report = pipeline::evaluate(&cfg, &layout, force)?;
            print!("{}", report.table);
        }
        Command::Export { input, output } => {
            let map = read_tensor(&input)?;
            export_heatmap_image(&map, &output)?;
            println!("{}", output.display());
        }
        Command::Run { force } => run_all(&cfg, &layout, force)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
