//! Trains Jacobian SAE pairs around one FF block at several penalty
//! coefficients and prints how the Jacobian norm trades off against
//! reconstruction.
//!
//!     cargo run --release --example jsae_sweep

use scalar_workbench::jsae::{lambda_sweep, JsaeTrainConfig};
use scalar_workbench::lm::{harvest, train_lm, Corpus, HarvestConfig, LmConfig, LmTrainConfig, Segment, Split};
use scalar_workbench::sae::SaeConfig;
use scalar_workbench::workbench::SONNETS;

fn main() -> anyhow::Result<()> {
    let lm = LmConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        d_mlp: 256,
        context: 64,
        ..LmConfig::default()
    };
    let corpus = Corpus::from_bytes(SONNETS, lm.context, 0)?;
    let (model, _) = train_lm::<f32>(&corpus, &lm, &LmTrainConfig { steps: 800, eval_every: 0, ..Default::default() })?;

    let seg = Segment::FfBlock(1);
    let grab = |split, seed| harvest(&model, &corpus, &HarvestConfig { sites: vec![seg.up(), seg.down()], max_samples: 4096, seq_len: 64, split, seed });
    let (train, eval) = (grab(Split::Train, 1)?, grab(Split::Val, 2)?);
    let pair = |h: &scalar_workbench::lm::Harvest<f32>| -> anyhow::Result<_> { Ok((h.site(seg.up())?.clone(), h.site(seg.down())?.clone())) };
    let (tx, ty) = pair(&train)?;
    let (ex, ey) = pair(&eval)?;

    let rows = lambda_sweep(
        &model,
        seg,
        &[0.0, 1e-3, 3.3e-3, 1e-2],
        (&tx, &ty),
        (&ex, &ey),
        &SaeConfig { k: 8, ..SaeConfig::default() },
        &JsaeTrainConfig { steps: 400, eval_samples: 1024, ..Default::default() },
    )?;
    println!("{seg}");
    println!("{:>8}  {:>9}  {:>9}  {:>8}", "lambda", "recon x", "recon y", "|J|_1");
    for r in &rows {
        println!("{:>8.1e}  {:>9.4}  {:>9.4}  {:>8.3}", r.lambda, r.recon_x, r.recon_y, r.jac_l1);
    }
    Ok(())
}
