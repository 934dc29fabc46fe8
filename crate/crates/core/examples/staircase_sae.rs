//! Trains TopK-x8 and Staircase-x8 families on the residual stream of a
//! small model, then compares parameter counts, reconstruction, splice-in
//! CE and how often each member reaches into earlier feature chunks.
//!
//!     cargo run --release --example staircase_sae

use scalar_workbench::lm::{harvest, train_lm, Corpus, HarvestConfig, LmConfig, LmTrainConfig, Site, Split};
use scalar_workbench::sae::{chunk_usage, splice_eval, train_family, SaeConfig, SaeFamily, SaeTrainConfig, Variant};
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

    let sites = vec![Site::ResidPre(0), Site::ResidPre(1), Site::ResidPost(1)];
    let h = harvest(&model, &corpus, &HarvestConfig { sites: sites.clone(), max_samples: 8192, seq_len: 64, split: Split::Train, seed: 1 })?;
    let data: Vec<_> = sites.iter().map(|&s| h.site(s)).collect::<Result<_, _>>()?;
    let sae = SaeConfig { k: 8, ..SaeConfig::default() };

    for variant in [Variant::TopkX8, Variant::StaircaseX8] {
        let mut fam = SaeFamily::<f32>::new(variant, &sites, lm.d_model, &sae, 0)?;
        fam.init_decoder_bias(&data)?;
        let hist = train_family(&mut fam, &data, &SaeTrainConfig { steps: 400, ..Default::default() })?;
        println!("{variant}: {} parameters", fam.parameter_count());
        let usage = chunk_usage(&fam, &data)?;
        for (m, &site) in sites.iter().enumerate() {
            let spliced = splice_eval(&model, &[fam.sae(m)?], &corpus, Split::Val, 8, 64)?;
            println!(
                "  {site:<14} loss {:>8.3}  ΔCE {:.4}  earlier-chunk share {:.2}",
                hist.tail_mean(50)[m],
                spliced.delta_ce,
                usage.earlier_share(m)
            );
        }
    }
    Ok(())
}
