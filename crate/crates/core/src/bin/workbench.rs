use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use scalar_workbench::workbench::{Pipeline, Precision, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "workbench", about = "Train toy LMs and SAEs, score interaction sparsity with SCALAR")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// JSON run configuration; defaults are desk scale.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Sets every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// 576 attribution samples, 5 IG terms, 50 prompts.
    #[arg(long, global = true)]
    full_scale: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Tokenize a text file and fix the train/validation split.
    Ingest {
        /// Local text file; the bundled sonnets when omitted.
        source: Option<PathBuf>,
    },
    TrainLm,
    TrainSae,
    TrainJsae,
    Attribute,
    Scalar,
    Report,
    /// Every stage in order, skipping those already complete.
    Pipeline,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config = config.with_seed(s);
    }
    if let Some(p) = cli.precision {
        config.precision = p;
    }
    if cli.full_scale {
        config = config.full_scale();
    }
    if let Verb::Ingest { source: Some(s) } = &cli.verb {
        config.corpus = Some(s.clone());
    }
    let mut p = Pipeline::new(config, &cli.out)?;
    p.log = Box::new(|m| eprintln!("{m}"));
    let stage = match cli.verb {
        Verb::Ingest { .. } => Stage::Ingest,
        Verb::TrainLm => Stage::TrainLm,
        Verb::TrainSae => Stage::TrainSae,
        Verb::TrainJsae => Stage::TrainJsae,
        Verb::Attribute => Stage::Attribute,
        Verb::Scalar => Stage::Scalar,
        Verb::Report => Stage::Report,
        Verb::Pipeline => {
            p.run_all()?;
            println!("{}", cli.out.join("report").display());
            return Ok(());
        }
    };
    p.run(stage)?;
    Ok(())
}
