//! Acceptance checks. Prints one PASS/FAIL line per criterion with the
//! measured values and the pinned tolerance.
//!
//! Heavy criteria run two desk-scale pipelines, so expect tens of minutes on
//! one core. Set `ACCEPTANCE_STRICT=1` to exit nonzero when any criterion
//! fails; by default failures are reported but do not fail the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use scalar_workbench::attribution::{LatentMap, Readout};
use scalar_workbench::jsae::{jacobian, jsae_loss, FfWeights, PairVars};
use scalar_workbench::lm::{harvest, lm_loss_and_grads, Harvest, HarvestConfig, LmConfig, LmWeights, Segment, Site, Split};
use scalar_workbench::sae::{chunk_usage, splice_eval, tape_recon_loss, train_family, Code, SaeConfig, SaeFamily, SaeRef, SaeVars, Variant};
use scalar_workbench::scalar::{
    ablation_curve, edge_sequence, full_circuit_logits, subcircuit_forward, subcircuit_latents, subcircuit_latents_naive, RankIndex, Reference,
    REFERENCE_SEQUENCE,
};
use scalar_workbench::tensor::{grad_check, GradCheckConfig, RngState, Tape, Tensor};
use scalar_workbench::workbench::{reductions, sclr, Pipeline, RunConfig, SegmentKind, Stage};

const SONNETS: &[u8] = include_bytes!("../data/sonnets.txt");

// Pinned tolerances.
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const JAC_TOL: f64 = 1e-4;
const JAC_INSTANCES: usize = 100;
const ENDPOINT_TOL: f64 = 1e-6;
const BITMATCH_SETS: usize = 10;
const LN_VOCAB_BAND: f64 = 0.15;
const CE_DROP: f64 = 0.30;
const LM_BUDGET_S: f64 = 300.0;
const SEED_BAND: f64 = 0.20;
const EARLIER_MIN: f64 = 0.20;
const DETACH_MAX: f64 = 0.05;
const OVERHEAD_MAX: f64 = 0.05;
const PIPELINE_BUDGET_S: f64 = 7200.0;
const FUZZ_TENSORS: usize = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

// ---------------------------------------------------------------- 1

fn tiny_lm(seed: u64) -> LmWeights<f64> {
    let cfg = LmConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_mlp: 12,
        context: 8,
        init_std: 0.3,
        seed,
        ..LmConfig::default()
    };
    let mut w = LmWeights::<f64>::init(&cfg).expect("valid toy config");
    let mut rng = RngState::new(seed ^ 0x55);
    w.params.visit_mut(|name, t| {
        if name.contains("norm") {
            t.data_mut().iter_mut().for_each(|x| *x += 0.2 * rng.normal());
        }
    });
    w
}

fn lm_grad_suite() -> Result<(usize, f64)> {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_INSTANCES as u64 {
        let w = tiny_lm(seed);
        let mut rng = RngState::new(seed + 1000);
        let wins: Vec<Vec<u32>> = (0..2).map(|_| (0..6).map(|_| rng.below(128) as u32).collect()).collect();
        let leaves: Vec<Tensor<f64>> = w.params.leaves().into_iter().cloned().collect();
        let report = grad_check(
            &leaves,
            |p| {
                let mut it = p.iter().cloned();
                let ww = LmWeights { config: w.config.clone(), params: w.params.map(|_, _| it.next().expect("leaf count")) };
                let refs: Vec<&[u32]> = wins.iter().map(|v| v.as_slice()).collect();
                let (l, g) = lm_loss_and_grads(&ww, &refs)?;
                Ok((l, g.leaves().into_iter().cloned().collect()))
            },
            &GradCheckConfig { max_coords_per_block: Some(8), seed, ..GradCheckConfig::default() },
        )?;
        worst = worst.max(report.max_rel_err());
    }
    Ok((GRAD_INSTANCES, worst))
}

/// Every row keeps a clear gap at the TopK boundary and around zero, so
/// finite differences never cross a selection switch.
fn clear_margins(pre: &Tensor<f64>, k: usize, margin: f64) -> bool {
    pre.rows().all(|r| {
        let mut v = r.to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        let gap = if k < v.len() { v[k - 1] - v[k] } else { f64::INFINITY };
        gap > margin && v.iter().all(|x| x.abs() > margin)
    })
}

fn take_grads(g: &mut scalar_workbench::tensor::Gradients<f64>, vars: &[scalar_workbench::tensor::Var], p: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    vars.iter().zip(p).map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))).collect()
}

fn sae_grad_suite() -> Result<(usize, f64)> {
    let (mut checked, mut worst) = (0, 0.0f64);
    let cfg = SaeConfig { k: 3, expansion: 2, wide_expansion: 2 };
    for seed in 0..500u64 {
        let f = SaeFamily::<f64>::new(Variant::TopkX8, &[Site::ResidPre(0)], 4, &cfg, seed)?;
        let mut rng = RngState::new(seed + 100);
        let x = Tensor::randn([3, 4], 1.0, &mut rng);
        if !clear_margins(&f.sae(0)?.pre_activations(&x)?, f.k, 1e-3) {
            continue;
        }
        let m = &f.members[0];
        let params = vec![f.stores[0].w_enc.clone(), f.stores[0].w_dec.clone(), m.b_enc.clone(), m.b_dec.clone()];
        let report = grad_check(
            &params,
            |p| {
                let mut tape = Tape::new();
                let v = sae_vars(&mut tape, &p[..4]);
                let xv = tape.constant(x.clone());
                let loss = tape_recon_loss(&mut tape, v, m.width, 0, f.k, xv)?;
                let mut g = tape.backward(loss)?;
                Ok((tape.value(loss).item(), take_grads(&mut g, &[v.w_enc, v.w_dec, v.b_enc, v.b_dec], p)))
            },
            &GradCheckConfig::default(),
        )?;
        worst = worst.max(report.max_rel_err());
        checked += 1;
        if checked == GRAD_INSTANCES {
            break;
        }
    }
    Ok((checked, worst))
}

fn sae_vars(tape: &mut Tape<f64>, p: &[Tensor<f64>]) -> SaeVars {
    SaeVars {
        w_enc: tape.param(p[0].clone()),
        w_dec: tape.param(p[1].clone()),
        b_enc: tape.param(p[2].clone()),
        b_dec: tape.param(p[3].clone()),
    }
}

fn jsae_model(seed: u64) -> LmWeights<f64> {
    let cfg = LmConfig {
        n_layers: 1,
        d_model: 4,
        n_heads: 1,
        d_mlp: 6,
        context: 4,
        init_std: 0.7,
        seed,
        ..LmConfig::default()
    };
    let mut w = LmWeights::<f64>::init(&cfg).expect("valid toy config");
    let mut rng = RngState::new(seed ^ 0xf00d);
    let l = &mut w.params.layers[0];
    l.b1 = Tensor::randn([6], 0.3, &mut rng);
    l.b2 = Tensor::randn([4], 0.3, &mut rng);
    l.norm2.alpha = Tensor::from_fn([4], |i| 0.5 + 0.1 * i as f64);
    l.norm2.gamma = Tensor::randn([4], 1.0, &mut rng);
    l.norm2.beta = Tensor::randn([4], 0.2, &mut rng);
    w
}

fn jsae_pair(seg: Segment, seed: u64) -> Result<SaeFamily<f64>> {
    let cfg = SaeConfig { k: 3, expansion: 3, wide_expansion: 3 };
    let mut f = SaeFamily::new(Variant::TopkX8, &[seg.up(), seg.down()], 4, &cfg, seed)?;
    let mut rng = RngState::new(seed ^ 0xbeef);
    for m in &mut f.members {
        m.b_enc = Tensor::randn([m.width], 0.3, &mut rng);
        m.b_dec = Tensor::randn([4], 0.3, &mut rng);
    }
    Ok(f)
}

/// Both encodings and the downstream encoding at the segment output of
/// the upstream reconstruction keep clear selection margins.
fn jsae_margins(ff: &FfWeights<'_, f64>, fam: &SaeFamily<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> Result<bool> {
    let (sx, sy) = (fam.sae(0)?, fam.sae(1)?);
    let mut ok = clear_margins(&sx.pre_activations(x)?, fam.k, 2e-2) && clear_margins(&sy.pre_activations(y)?, fam.k, 2e-2);
    let xh = sx.reconstruct(x)?;
    let outs: Vec<Vec<f64>> = xh.rows().map(|r| ff.apply_row(r)).collect();
    ok &= clear_margins(&sy.pre_activations(&Tensor::from_rows(&outs)?)?, fam.k, 2e-2);
    Ok(ok)
}

fn jsae_grad_suite() -> Result<(usize, f64)> {
    let (mut checked, mut worst) = (0, 0.0f64);
    for seg in [Segment::FfLayer(0), Segment::FfBlock(0)] {
        let mut here = 0;
        for seed in 0..2000u64 {
            let model = jsae_model(seed);
            let ff = FfWeights::of(&model, seg)?;
            let fam = jsae_pair(seg, seed)?;
            let mut rng = RngState::new(seed + 9000);
            let x = Tensor::<f64>::randn([2, 4], 1.0, &mut rng);
            let y = Tensor::from_rows(&x.rows().map(|r| ff.apply_row(r)).collect::<Vec<_>>())?;
            if !jsae_margins(&ff, &fam, &x, &y)? {
                continue;
            }
            let mut params = Vec::new();
            for m in &fam.members {
                let s = &fam.stores[m.store];
                params.extend([s.w_enc.clone(), s.w_dec.clone(), m.b_enc.clone(), m.b_dec.clone()]);
            }
            let (wx, wy) = (fam.members[0].width, fam.members[1].width);
            let report = grad_check(
                &params,
                |p| {
                    let mut tape = Tape::new();
                    let pair = PairVars { x: sae_vars(&mut tape, &p[..4]), y: sae_vars(&mut tape, &p[4..]), width_x: wx, width_y: wy, k: fam.k };
                    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
                    let terms = jsae_loss(&mut tape, pair, &ff, xv, yv, 0.3)?;
                    let mut g = tape.backward(terms.total)?;
                    let vars: Vec<_> = [pair.x, pair.y].iter().flat_map(|v| [v.w_enc, v.w_dec, v.b_enc, v.b_dec]).collect();
                    Ok((tape.value(terms.total).item(), take_grads(&mut g, &vars, p)))
                },
                &GradCheckConfig::default(),
            )?;
            worst = worst.max(report.max_rel_err());
            here += 1;
            if here == GRAD_INSTANCES {
                break;
            }
        }
        checked = if checked == 0 { here } else { checked.min(here) };
    }
    Ok((checked, worst))
}

fn criterion_1() -> Result<Outcome> {
    let t0 = Instant::now();
    let (n_lm, lm) = lm_grad_suite()?;
    let (n_sae, sae) = sae_grad_suite()?;
    let (n_j, j) = jsae_grad_suite()?;
    let secs = t0.elapsed().as_secs_f64();
    let pass = [n_lm, n_sae, n_j].iter().all(|&n| n >= GRAD_INSTANCES) && lm.max(sae).max(j) < GRAD_TOL && secs < 60.0;
    Ok(outcome(
        pass,
        format!("max rel err LM {lm:.1e} ({n_lm}), TopK {sae:.1e} ({n_sae}), JSAE {j:.1e} ({n_j} per segment); tol {GRAD_TOL:.0e}, {secs:.1}s < 60s"),
    ))
}

// ---------------------------------------------------------------- 2

fn fd_jacobian(sx: &SaeRef<'_, f64>, sy: &SaeRef<'_, f64>, ff: &FfWeights<'_, f64>, code: &Code<f64>, down: &[usize]) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let eval = |c: &Code<f64>| {
        let mut xh = vec![0.0; sx.d_model()];
        sx.decode_sparse(c, &mut xh);
        let mut pre = vec![0.0; sy.width];
        sy.pre_row(&ff.apply_row(&xh), &mut pre);
        down.iter().map(|&i| pre[i]).collect::<Vec<_>>()
    };
    (0..code.len())
        .map(|slot| {
            let (mut p, mut m) = (code.clone(), code.clone());
            p.val[slot] += h;
            m.val[slot] -= h;
            eval(&p).iter().zip(eval(&m)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect()
}

fn criterion_2() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for seg in [Segment::FfLayer(0), Segment::FfBlock(0)] {
        let (mut checked, mut worst) = (0, 0.0f64);
        for seed in 0..10 * JAC_INSTANCES as u64 {
            let model = jsae_model(seed);
            let ff = FfWeights::of(&model, seg)?;
            let fam = jsae_pair(seg, seed)?;
            let (sx, sy) = (fam.sae(0)?, fam.sae(1)?);
            let mut rng = RngState::new(seed + 500);
            let x = Tensor::<f64>::randn([1, 4], 1.5, &mut rng);
            let code = sx.encode_row(x.row(0));
            if code.is_empty() {
                continue;
            }
            let j = jacobian(&sx, &sy, &ff, &code)?;
            let fd = fd_jacobian(&sx, &sy, &ff, &code, &j.down);
            for (c, col) in fd.iter().enumerate() {
                for (r, &f) in col.iter().enumerate() {
                    worst = worst.max(rel_err(j.values.data()[r * j.up.len() + c], f));
                }
            }
            checked += 1;
            if checked == JAC_INSTANCES {
                break;
            }
        }
        pass &= checked >= JAC_INSTANCES && worst < JAC_TOL;
        parts.push(format!("{} {checked} instances max rel err {worst:.1e}", seg.family()));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    Ok(outcome(pass, format!("{}; tol {JAC_TOL:.0e}, {secs:.1}s < 120s", parts.join(", "))))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Result<Outcome> {
    let cfg = LmConfig { n_layers: 2, d_model: 8, n_heads: 2, d_mlp: 16, context: 16, init_std: 0.4, seed: 5, ..LmConfig::default() };
    let model = LmWeights::<f64>::init(&cfg)?;
    let corpus = scalar_workbench::lm::Corpus::from_bytes(&SONNETS[..20_000], 16, 0)?;
    let sae = SaeConfig { k: 3, expansion: 4, wide_expansion: 4 };
    let (mut logit_err, mut pcsm_end, mut sets, mut mismatches) = (0.0f64, 0.0f64, 0, 0);
    let mut rng = RngState::new(21);
    for seg in [Segment::FfLayer(1), Segment::FfBlock(0), Segment::TransformerBlock(1)] {
        let fam = SaeFamily::<f64>::new(Variant::TopkX8, &[seg.up(), seg.down()], 8, &sae, 3)?;
        let map = LatentMap::new(&model, seg, fam.sae(0)?, fam.sae(1)?, Readout::GatedPreTopk)?;
        let (wd, wu) = (map.width_down(), map.width_up());
        let prompts: Vec<Vec<u32>> = (0..3).map(|i| corpus.block(corpus.val_blocks[i])[..12].to_vec()).collect();
        for tokens in &prompts {
            let prep = map.prepare(tokens)?;
            let all = RankIndex::new(wd, wu, rng.permutation(wd * wu).into_iter().map(|r| r as u32).collect())?;
            let a = subcircuit_forward(&map, &prep, &all, all.total() as u64)?;
            logit_err = logit_err.max(a.max_abs_diff(&full_circuit_logits(&map, &prep)?));
            for _ in 0..4 {
                let idx = RankIndex::new(wd, wu, rng.permutation(wd * wu).into_iter().map(|r| r as u32).collect())?;
                let n = rng.below(wd * wu + 1) as u64;
                sets += 1;
                if subcircuit_latents(&map, &prep, &idx, n)? != subcircuit_latents_naive(&map, &prep, &idx, n)? {
                    mismatches += 1;
                }
            }
        }
        let mut r2 = RngState::new(22);
        let ranking = scalar_workbench::attribution::rank_edges(&scalar_workbench::attribution::EdgeScoreMatrix {
            scores: Tensor::from_fn([wd, wu], |_| r2.uniform()),
            samples: 1,
            terms: 1,
        })?;
        let curve = ablation_curve(&map, &prompts, &ranking, &edge_sequence(wd * wu)?, Reference::FullCircuit)?;
        pcsm_end = pcsm_end.max(*curve.mean_kl.last().expect("non-empty curve"));
    }
    let pass = logit_err <= ENDPOINT_TOL && pcsm_end <= ENDPOINT_TOL && sets >= BITMATCH_SETS && mismatches == 0;
    Ok(outcome(
        pass,
        format!("all-edge logit err {logit_err:.1e}, full-circuit endpoint KL {pcsm_end:.1e} (tol {ENDPOINT_TOL:.0e}); batched vs naive {mismatches} mismatches over {sets} edge sets"),
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Result<Outcome> {
    let got = edge_sequence(262_144)?;
    let pass = got == REFERENCE_SEQUENCE && got.len() == 35;
    Ok(outcome(pass, format!("{} values, first {:?}, last {}", got.len(), &got[..6], got[got.len() - 1])))
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Result<Outcome> {
    let mut rng = RngState::new(11);
    let mut tensors32 = Vec::new();
    let mut tensors64 = Vec::new();
    for i in 0..FUZZ_TENSORS {
        let rank = rng.below(4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.below(5)).collect();
        let n: usize = shape.iter().product();
        if i % 2 == 0 {
            tensors32.push(Tensor::new(shape, (0..n).map(|_| f32::from_bits(rng.next_u64() as u32)).collect())?);
        } else {
            tensors64.push(Tensor::new(shape, (0..n).map(|_| f64::from_bits(rng.next_u64())).collect())?);
        }
    }
    let mut exact = true;
    let mut bytes_checked = 0usize;
    let mut undetected = 0usize;
    macro_rules! fuzz {
        ($ts:expr, $ty:ty) => {
            for chunk in $ts.chunks(25) {
                let named: Vec<(String, &Tensor<$ty>)> = chunk.iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect();
                let bytes = sclr::encode(&named)?;
                let back = sclr::decode::<$ty>(&bytes)?;
                exact &= back.len() == chunk.len()
                    && back.iter().zip(chunk).all(|((_, a), b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
                for i in 0..bytes.len() {
                    let mut bad = bytes.clone();
                    bad[i] ^= 1 << (i % 8);
                    if !matches!(sclr::decode::<$ty>(&bad), Err(scalar_workbench::Error::Checksum { .. })) {
                        undetected += 1;
                    }
                }
                bytes_checked += bytes.len();
            }
        };
    }
    fuzz!(tensors32, f32);
    fuzz!(tensors64, f64);
    Ok(outcome(
        exact && undetected == 0,
        format!("{FUZZ_TENSORS} tensors round trip bit-exact: {exact}; {bytes_checked} single-byte corruptions, {undetected} missed by checksum"),
    ))
}

// ---------------------------------------------------------------- desk runs

struct DeskRun {
    pipeline: Pipeline,
    stage_secs: Vec<(Stage, f64)>,
}

impl DeskRun {
    fn secs(&self, stage: Stage) -> f64 {
        self.stage_secs.iter().find(|(s, _)| *s == stage).map_or(0.0, |s| s.1)
    }

    fn total_secs(&self) -> f64 {
        self.stage_secs.iter().map(|s| s.1).sum()
    }

    fn sae_record(&self, variant: Variant, kind: SegmentKind, f: usize) -> Result<scalar_workbench::workbench::SaeRecord> {
        let path = self.pipeline.out.join(format!("sae/{}.{}.json", variant.name(), kind.family_name(f)));
        Ok(serde_json::from_slice(&std::fs::read(&path).with_context(|| path.display().to_string())?)?)
    }
}

fn desk_run(dir: &Path, tag: &str) -> Result<DeskRun> {
    let mut pipeline = Pipeline::new(RunConfig::default(), dir)?;
    let tag = tag.to_string();
    pipeline.log = Box::new(move |m| eprintln!("[{tag}] {m}"));
    let mut stage_secs = Vec::new();
    for stage in Stage::ALL {
        let t0 = Instant::now();
        pipeline.run(stage)?;
        stage_secs.push((stage, t0.elapsed().as_secs_f64()));
    }
    Ok(DeskRun { pipeline, stage_secs })
}

/// The residual-stream family's sites and their harvested activations.
fn residual_data(run: &DeskRun) -> Result<(LmWeights<f32>, Harvest<f32>, Vec<Site>)> {
    let p = &run.pipeline;
    let c = &p.config;
    let w = p.load_lm::<f32>()?;
    let sites = SegmentKind::TransformerBlock.families(c.lm.n_layers).remove(0);
    let h = harvest(
        &w,
        &p.corpus()?,
        &HarvestConfig { sites: sites.clone(), max_samples: c.sae.samples, seq_len: c.lm.context, split: Split::Train, seed: c.seeds.harvest },
    )?;
    Ok((w, h, sites))
}

fn criterion_4(run: &DeskRun) -> Result<Outcome> {
    let path = run.pipeline.out.join("lm/train.json");
    let rec: scalar_workbench::workbench::LmRecord = serde_json::from_slice(&std::fs::read(&path)?)?;
    let start = rec.history.initial_val().context("no initial validation loss")?;
    let end = rec.history.final_val().context("no final validation loss")?;
    let ln = (rec.config.vocab as f64).ln();
    let drop = 1.0 - end / start;
    let secs = run.secs(Stage::TrainLm);
    let pass = (start - ln).abs() <= LN_VOCAB_BAND && drop >= CE_DROP && secs <= LM_BUDGET_S;
    Ok(outcome(
        pass,
        format!("val CE {start:.3} (ln 128 = {ln:.3} ± {LN_VOCAB_BAND}) -> {end:.3}, drop {:.0}% (>= {:.0}%), {secs:.0}s (<= {LM_BUDGET_S:.0}s)", 100.0 * drop, 100.0 * CE_DROP),
    ))
}

fn criterion_5(run: &DeskRun) -> Result<Outcome> {
    let c = &run.pipeline.config;
    let (w, h, sites) = residual_data(run)?;
    let data: Vec<&Tensor<f32>> = sites.iter().map(|&s| h.site(s)).collect::<Result<_, _>>()?;
    let corpus = run.pipeline.corpus()?;

    let mut worst_l0 = 0;
    let mut deltas: Vec<Vec<f64>> = Vec::new();
    for seed in [c.seeds.sae, c.seeds.sae + 1] {
        let fam = if seed == c.seeds.sae {
            run.pipeline.load_family::<f32>(Variant::TopkX8, Segment::TransformerBlock(0))?
        } else {
            let mut fam = SaeFamily::<f32>::new(Variant::TopkX8, &sites, c.lm.d_model, &c.sae.config, seed)?;
            fam.init_decoder_bias(&data)?;
            train_family(&mut fam, &data, &scalar_workbench::sae::SaeTrainConfig { seed, ..c.sae.train.clone() })?;
            fam
        };
        let mut d = Vec::new();
        for (m, x) in data.iter().enumerate() {
            let sae = fam.sae(m)?;
            worst_l0 = worst_l0.max(sae.encode_sparse(x)?.iter().map(|code| code.len()).max().unwrap_or(0));
            d.push(splice_eval(&w, &[sae], &corpus, Split::Val, c.sae.splice_windows, c.lm.context - 1)?.delta_ce);
        }
        deltas.push(d);
    }
    let positive = deltas.iter().flatten().all(|&d| d > 0.0);
    let spread = deltas[0].iter().zip(&deltas[1]).map(|(a, b)| (a - b).abs() / a.abs()).fold(0.0, f64::max);
    let k = c.sae.config.k;
    let pass = worst_l0 <= k && positive && spread <= SEED_BAND;
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join("/");
    Ok(outcome(
        pass,
        format!(
            "max L0 {worst_l0} (K = {k}); TopK ΔCE per residual site seed A {} seed B {}; max seed deviation {:.0}% (<= {:.0}%)",
            fmt(&deltas[0]),
            fmt(&deltas[1]),
            100.0 * spread,
            100.0 * SEED_BAND
        ),
    ))
}

fn criterion_6(run: &DeskRun) -> Result<Outcome> {
    let c = &run.pipeline.config;
    let mut pass = true;
    let mut parts = Vec::new();
    let mut min_share = f64::INFINITY;
    for &kind in &c.sae.segments {
        let (mut stair, mut topk) = (0, 0);
        for f in 0..kind.families(c.lm.n_layers).len() {
            let rec = run.sae_record(Variant::StaircaseX8, kind, f)?;
            for m in 0..rec.chunk_usage.per_member.len() {
                if rec.chunk_usage.index[m] >= 2 {
                    min_share = min_share.min(rec.chunk_usage.earlier_share(m));
                }
            }
            stair += rec.parameters;
            topk += run.sae_record(Variant::TopkX8, kind, f)?.parameters;
        }
        let overhead = stair as f64 / topk as f64 - 1.0;
        pass &= overhead < OVERHEAD_MAX;
        parts.push(format!("{} overhead {:.2}%", kind.name(), 100.0 * overhead));
    }
    pass &= min_share > EARLIER_MIN;

    let (_, h, sites) = residual_data(run)?;
    let data: Vec<&Tensor<f32>> = sites.iter().map(|&s| h.site(s)).collect::<Result<_, _>>()?;
    let mut fam = SaeFamily::<f32>::new(Variant::StaircaseDetach, &sites, c.lm.d_model, &c.sae.config, c.seeds.sae)?;
    fam.init_decoder_bias(&data)?;
    train_family(&mut fam, &data, &scalar_workbench::sae::SaeTrainConfig { seed: c.seeds.sae, ..c.sae.train.clone() })?;
    let usage = chunk_usage(&fam, &data)?;
    let detach = (0..sites.len()).filter(|&m| usage.index[m] >= 2).map(|m| usage.earlier_share(m)).fold(0.0, f64::max);
    pass &= detach < DETACH_MAX;
    Ok(outcome(
        pass,
        format!(
            "staircase min earlier-chunk share {:.0}% (> {:.0}%); detach max earlier-chunk share {:.0}% (< {:.0}%); {}",
            100.0 * min_share,
            100.0 * EARLIER_MIN,
            100.0 * detach,
            100.0 * DETACH_MAX,
            parts.join(", ")
        ),
    ))
}

fn criterion_7(run: &DeskRun) -> Result<Outcome> {
    let c = &run.pipeline.config;
    let mut pass = !c.jsae.segments.is_empty();
    let mut parts = Vec::new();
    for &seg in &c.jsae.segments {
        let path = run.pipeline.out.join(format!("jsae/{seg}.sweep.json"));
        let rows: Vec<scalar_workbench::workbench::JsaeRecord> = serde_json::from_slice(&std::fs::read(&path)?)?;
        let at = |l: f64| rows.iter().find(|r| r.lambda == l).map(|r| r.jac_l1).context("missing sweep extreme");
        let (base, pen) = (at(0.0)?, at(1e-2)?);
        pass &= pen < base;
        parts.push(format!("{seg}: mean |J|_1 {base:.3} at λ=0, {pen:.3} at λ=1e-2"));
    }
    Ok(outcome(pass, format!("{} (equal budget: {} steps)", parts.join("; "), c.jsae.train.steps)))
}

fn criterion_8(run: &DeskRun) -> Result<Outcome> {
    let c = &run.pipeline.config;
    let rows = run.pipeline.load_scores_table()?;
    let (base, cand) = &c.scalar.comparisons[0];
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [SegmentKind::FfBlock, SegmentKind::TransformerBlock] {
        let pick = |v: &str| {
            let sel: Vec<_> = rows.iter().filter(|r| r.variant == v && r.segment == kind && r.reference == Reference::FullModel).collect();
            let total: f64 = sel.iter().map(|r| r.relative).sum();
            let sem = sel.iter().map(|r| r.rel_sem * r.rel_sem).sum::<f64>().sqrt();
            (total, sem, sel.len())
        };
        let (b, bs, nb) = pick(base);
        let (s, ss, ns) = pick(cand);
        let red = reductions(&rows, &c.scalar.comparisons)?
            .into_iter()
            .find(|r| r.segment == kind && r.reference == Reference::FullModel && r.layer.is_none())
            .context("no aggregate reduction")?;
        let ok = nb == c.lm.n_layers && ns == nb && red.relative.value > 0.0 && s + ss < b - bs;
        pass &= ok;
        parts.push(format!(
            "{}: {base} {b:.4}±{bs:.4} vs {cand} {s:.4}±{ss:.4}, reduction {:.1}%±{:.1}%",
            kind.name(),
            red.relative.value,
            red.relative.sem
        ));
    }
    let secs = run.total_secs();
    pass &= secs <= PIPELINE_BUDGET_S;
    Ok(outcome(pass, format!("{}; pipeline {:.0} min (<= {:.0} min)", parts.join("; "), secs / 60.0, PIPELINE_BUDGET_S / 60.0)))
}

fn files_under(root: &Path, rel: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let dir = root.join(rel);
    for e in std::fs::read_dir(&dir).with_context(|| dir.display().to_string())? {
        out.push(Path::new(rel).join(e?.file_name()));
    }
    out.sort();
    Ok(out)
}

fn criterion_10(a: &DeskRun, b: &DeskRun) -> Result<Outcome> {
    let (ra, rb) = (&a.pipeline.out, &b.pipeline.out);
    let mut files = vec![PathBuf::from("manifest.json"), PathBuf::from("scalar/scores.json")];
    files.extend(files_under(ra, "scores")?);
    files.extend(files_under(ra, "curves")?);
    ensure!(files_under(ra, "scores")? == files_under(rb, "scores")?, "score file sets differ");
    let differing: Vec<String> = files
        .iter()
        .filter(|f| std::fs::read(ra.join(f)).ok() != std::fs::read(rb.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    Ok(outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("manifest and {} score/curve files byte-identical across two runs", files.len() - 1)
        } else {
            format!("differing: {}", differing.join(", "))
        },
    ))
}

// ---------------------------------------------------------------- main

/// `ACCEPTANCE_ONLY=1,2,9` restricts the run to the listed criteria.
fn wanted(n: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(n)),
        Err(_) => true,
    }
}

struct Tally {
    run: usize,
    failures: Vec<usize>,
}

impl Tally {
    fn report(&mut self, n: usize, what: &str, f: impl FnOnce() -> Result<Outcome>) {
        if !wanted(n) {
            return;
        }
        let o = f().unwrap_or_else(|e| outcome(false, format!("error: {e:#}")));
        self.run += 1;
        if !o.pass {
            self.failures.push(n);
        }
        println!("criterion {n:>2} {}: {what}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
}

fn main() -> Result<()> {
    let mut t = Tally { run: 0, failures: Vec::new() };
    t.report(1, "gradient suites", criterion_1);
    t.report(2, "Jacobian oracle", criterion_2);
    t.report(3, "subcircuit endpoints", criterion_3);

    let tmp = tempfile::tempdir()?;
    let desk = if (4..=8).chain([10]).any(wanted) {
        let a = desk_run(&tmp.path().join("a"), "run a");
        let b = if wanted(10) { Some(desk_run(&tmp.path().join("b"), "run b")) } else { None };
        Some((a, b))
    } else {
        None
    };
    let failed = |e: &anyhow::Error| anyhow::anyhow!("desk pipeline failed: {e:#}");
    if let Some((a, b)) = &desk {
        type Check = fn(&DeskRun) -> Result<Outcome>;
        let checks: [(usize, &str, Check); 5] = [
            (4, "toy LM", criterion_4),
            (5, "TopK SAE", criterion_5),
            (6, "staircase behavior", criterion_6),
            (7, "JSAE effect", criterion_7),
            (8, "SCALAR sign", criterion_8),
        ];
        for (n, what, check) in checks {
            t.report(n, what, || a.as_ref().map_err(failed).and_then(check));
        }
        t.report(9, "edge sequence", criterion_9);
        t.report(10, "determinism", || match (a, b) {
            (Ok(a), Some(Ok(b))) => criterion_10(a, b),
            (Err(e), _) | (_, Some(Err(e))) => Err(failed(e)),
            (_, None) => unreachable!("criterion 10 always runs both"),
        });
    } else {
        t.report(9, "edge sequence", criterion_9);
    }
    t.report(11, "SCLR container", criterion_11);

    println!("acceptance: {}/{} criteria pass", t.run - t.failures.len(), t.run);
    if !t.failures.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
    Ok(())
}
