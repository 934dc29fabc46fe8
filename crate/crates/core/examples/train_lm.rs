//! Trains the toy DyT language model on the bundled sonnets and prints the
//! validation curve.
//!
//!     cargo run --release --example train_lm -- [steps]

use std::time::Instant;

use scalar_workbench::lm::{train_lm, Corpus, LmConfig, LmTrainConfig};
use scalar_workbench::workbench::SONNETS;

fn main() -> anyhow::Result<()> {
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let lm = LmConfig::default();
    let corpus = Corpus::from_bytes(SONNETS, lm.context, 0)?;
    let tc = LmTrainConfig {
        steps,
        eval_every: 50,
        ..LmTrainConfig::default()
    };
    let t0 = Instant::now();
    let (w, hist) = train_lm::<f32>(&corpus, &lm, &tc)?;
    println!("parameters: {}", w.parameter_count());
    for (step, loss) in &hist.val_loss {
        println!("step {step:>5}  val CE {loss:.4}");
    }
    println!("ln 128 = {:.4}", (128f64).ln());
    println!("trained {steps} steps in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
