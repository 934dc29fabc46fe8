use super::*;
use crate::lm::{LmConfig, LmTrainConfig, Segment};
use crate::sae::{SaeConfig, SaeTrainConfig, Variant};

fn tiny() -> RunConfig {
    let mut c = RunConfig {
        lm: LmConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            context: 16,
            ..LmConfig::default()
        },
        lm_train: LmTrainConfig {
            steps: 10,
            seq_len: 16,
            eval_every: 5,
            eval_windows: 2,
            ..LmTrainConfig::default()
        },
        ..RunConfig::default()
    };
    c.sae.config = SaeConfig { k: 2, expansion: 2, wide_expansion: 4 };
    c.sae.train = SaeTrainConfig { steps: 10, batch_size: 32, ..SaeTrainConfig::default() };
    c.sae.samples = 256;
    c.sae.splice_windows = 2;
    c.jsae.segments = vec![Segment::FfBlock(1)];
    c.jsae.lambdas = vec![0.0, 1e-2];
    c.jsae.train.steps = 5;
    c.jsae.train.eval_samples = 32;
    c.jsae.score_lambda = Some(1e-2);
    c.attribution.samples = 4;
    c.attribution.terms = 2;
    c.attribution.seq_len = 16;
    c.scalar.prompts = 2;
    c.scalar.prompt_len = 6;
    c.scalar.comparisons.push(("topk-x8".into(), "jsae".into()));
    c
}

fn run(c: &RunConfig, dir: &std::path::Path) -> Pipeline {
    let mut p = Pipeline::new(c.clone(), dir).unwrap();
    p.run_all().unwrap();
    p
}

#[test]
fn pipeline_is_deterministic_resumable_and_reports() {
    let c = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = run(&c, a.path());
    run(&c, b.path());
    let ma = std::fs::read(a.path().join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.path().join("manifest.json")).unwrap());
    for f in pa.manifest().stages.iter().flat_map(|s| &s.outputs) {
        assert_eq!(std::fs::read(a.path().join(&f.path)).unwrap(), std::fs::read(b.path().join(&f.path)).unwrap(), "{}", f.path);
    }

    // Two JSAE pair containers, one per coefficient.
    let jsae = pa.manifest().stage(Stage::TrainJsae).unwrap();
    assert_eq!(jsae.outputs.iter().filter(|f| f.path.ends_with(".sclr")).count(), 2);

    // Score table: variants × layers rows per segment kind and reference.
    let table = std::fs::read_to_string(a.path().join("report/scalar_ff_block_full_model.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "variant,layer,absolute,abs_sem,relative,rel_sem");
    assert_eq!(lines.count(), 2 * 2 + 1);
    let table = std::fs::read_to_string(a.path().join("report/scalar_transformer_block_full_circuit.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2);
    let svg = std::fs::read_to_string(a.path().join("report/curves_ff_block_1_full_model.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 3);
    let red = std::fs::read_to_string(a.path().join("report/reduction_ff_block_full_model.csv")).unwrap();
    assert!(red.lines().any(|l| l.starts_with("topk-x8,staircase-x8,all,")));

    // A rerun does nothing; a changed output reruns its stage.
    let mut p = Pipeline::new(c.clone(), a.path()).unwrap();
    for s in Stage::ALL {
        assert!(!p.run(s).unwrap(), "{s} reran");
    }
    std::fs::write(a.path().join("report/report.json"), b"{}").unwrap();
    assert!(!p.is_complete(Stage::Report).unwrap());
    assert!(p.run(Stage::Report).unwrap());
    assert_eq!(std::fs::read(a.path().join("manifest.json")).unwrap(), ma);

    // A new attribution budget invalidates attribution and everything after.
    let mut c2 = c.clone();
    c2.attribution.samples = 5;
    let p2 = Pipeline::new(c2, a.path()).unwrap();
    assert!(p2.is_complete(Stage::TrainSae).unwrap());
    assert!(!p2.is_complete(Stage::Attribute).unwrap());
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(tiny(), dir.path()).unwrap();
    let e = p.run(Stage::Scalar).unwrap_err();
    assert!(matches!(e, crate::Error::Stage { ref stage, .. } if stage == "scalar"), "{e}");
    assert!(p.run(Stage::Ingest).unwrap());
    assert!(p.run(Stage::TrainSae).is_err());
}

#[test]
fn six_variants_give_six_containers() {
    let mut c = tiny();
    c.sae.variants = Variant::ALL.to_vec();
    c.sae.segments = vec![SegmentKind::TransformerBlock];
    c.jsae.segments.clear();
    c.jsae.score_lambda = None;
    c.scalar.comparisons = vec![("topk-x8".into(), "staircase-x8".into())];
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(c, dir.path()).unwrap();
    for s in [Stage::Ingest, Stage::TrainLm, Stage::TrainSae] {
        p.run(s).unwrap();
    }
    let rec = p.manifest().stage(Stage::TrainSae).unwrap();
    assert_eq!(rec.outputs.iter().filter(|f| f.path.ends_with(".sclr")).count(), 6);
}
