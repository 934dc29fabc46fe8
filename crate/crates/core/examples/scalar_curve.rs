//! Scores a transformer-block SAE pair with SCALAR: integrated-gradient edge
//! attributions, the ablation curve over retained edges and its area.
//!
//!     cargo run --release --example scalar_curve

use scalar_workbench::attribution::{edge_scores, rank_edges, AttributionConfig, LatentMap, Readout};
use scalar_workbench::lm::{harvest, train_lm, Corpus, HarvestConfig, LmConfig, LmTrainConfig, Segment, Site, Split};
use scalar_workbench::sae::{train_family, SaeConfig, SaeFamily, SaeTrainConfig, Variant};
use scalar_workbench::scalar::{ablation_curves, auc, compare, edge_sequence, validation_prompts, Reference};
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
    let prompts = validation_prompts(&corpus, 5, 32)?;
    let seg = Segment::TransformerBlock(1);

    let mut scores = Vec::new();
    for variant in [Variant::TopkX8, Variant::StaircaseX8] {
        let mut fam = SaeFamily::<f32>::new(variant, &sites, lm.d_model, &SaeConfig { k: 8, ..SaeConfig::default() }, 0)?;
        fam.init_decoder_bias(&data)?;
        train_family(&mut fam, &data, &SaeTrainConfig { steps: 300, ..Default::default() })?;

        let map = LatentMap::new(&model, seg, fam.sae_at(seg.up())?, fam.sae_at(seg.down())?, Readout::GatedPreTopk)?;
        let matrix = edge_scores(&map, &corpus, &AttributionConfig { samples: 32, seq_len: 64, ..Default::default() })?;
        let ranking = rank_edges(&matrix)?;
        let seq = edge_sequence(ranking.len())?;
        let curve = &ablation_curves(&map, &prompts, &ranking, &seq, &[Reference::FullModel])?[0];
        let score = auc(curve)?;
        println!("{variant} {seg}: {} edges", ranking.len());
        for (n, kl) in curve.edges.iter().zip(&curve.mean_kl).step_by(4) {
            println!("  {n:>7} edges  KL {kl:.4}");
        }
        println!("  relative SCALAR {:.5} ± {:.5}", score.relative.value, score.relative.sem);
        scores.push(score.relative);
    }
    let r = compare(scores[0], scores[1])?;
    println!("staircase vs topk: {:.1}% ± {:.1}% reduction", r.value, r.sem);
    Ok(())
}
