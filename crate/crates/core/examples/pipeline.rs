//! Runs every workbench stage on a miniature configuration and lists the
//! artifacts. A second call skips every stage because its outputs are
//! already on disk and unchanged.
//!
//!     cargo run --release --example pipeline -- [out-dir]

use std::path::PathBuf;

use scalar_workbench::jsae::JsaeTrainConfig;
use scalar_workbench::lm::{LmConfig, LmTrainConfig, Segment};
use scalar_workbench::sae::{SaeConfig, SaeTrainConfig};
use scalar_workbench::workbench::{JsaeStage, Pipeline, RunConfig, SaeStage, ScalarStage};

fn main() -> anyhow::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("workbench-example"));
    let mut config = RunConfig {
        lm: LmConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            context: 32,
            ..LmConfig::default()
        },
        lm_train: LmTrainConfig { steps: 600, seq_len: 32, eval_every: 200, ..Default::default() },
        sae: SaeStage {
            config: SaeConfig { k: 8, expansion: 2, ..SaeConfig::default() },
            train: SaeTrainConfig { steps: 200, ..Default::default() },
            samples: 2048,
            splice_windows: 4,
            ..Default::default()
        },
        jsae: JsaeStage {
            segments: vec![Segment::FfBlock(1)],
            lambdas: vec![0.0, 1e-2],
            train: JsaeTrainConfig { steps: 100, eval_samples: 256, ..Default::default() },
            score_lambda: Some(1e-2),
        },
        scalar: ScalarStage { prompts: 3, prompt_len: 16, ..Default::default() },
        ..RunConfig::default()
    };
    config.attribution.samples = 16;
    config.attribution.seq_len = 32;

    let mut p = Pipeline::new(config, &out)?;
    p.log = Box::new(|m| println!("{m}"));
    p.run_all()?;
    p.run_all()?;

    println!("\nreport files in {}:", out.join("report").display());
    let mut names: Vec<_> = std::fs::read_dir(out.join("report"))?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
    names.sort();
    for n in names {
        println!("  {}", n.to_string_lossy());
    }
    Ok(())
}
