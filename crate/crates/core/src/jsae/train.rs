use serde::{Deserialize, Serialize};

use super::{jacobian, jsae_loss, FfWeights, PairVars};
use crate::error::{Error, Result};
use crate::lm::{LmWeights, Segment};
use crate::sae::{SaeConfig, SaeFamily, SaeVars, Variant};
use crate::tensor::{AdamConfig, AdamState, RngState, Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JsaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Samples used for the post-training evaluation.
    pub eval_samples: usize,
}

impl Default for JsaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 128,
            lr: 2e-3,
            seed: 0,
            eval_samples: 2048,
        }
    }
}

/// Per-step batch values of the three loss terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JsaeHistory {
    pub recon_x: Vec<f64>,
    pub recon_y: Vec<f64>,
    pub jac: Vec<f64>,
}

fn paired_batch<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, batch: usize, rng: &mut RngState) -> (Tensor<S>, Tensor<S>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut bx = Vec::with_capacity(batch * d);
    let mut by = Vec::with_capacity(batch * d);
    for _ in 0..batch {
        let r = rng.below(n);
        bx.extend_from_slice(x.row(r));
        by.extend_from_slice(y.row(r));
    }
    (
        Tensor::new(vec![batch, d], bx).expect("batch shape"),
        Tensor::new(vec![batch, d], by).expect("batch shape"),
    )
}

/// Trains a pair of x8 TopK SAEs on both sides of `seg` with the Jacobian
/// penalty. Rows of `x` and `y` must come from the same token positions.
/// The returned family has the upstream member first.
pub fn train_jsae_pair<S: Scalar>(
    model: &LmWeights<S>,
    seg: Segment,
    lambda: f64,
    x: &Tensor<S>,
    y: &Tensor<S>,
    sae: &SaeConfig,
    config: &JsaeTrainConfig,
) -> Result<(SaeFamily<S>, JsaeHistory)> {
    let ff = FfWeights::of(model, seg)?;
    if x.shape() != y.shape() {
        return Err(Error::shape("paired JSAE data", x.shape(), y.shape()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut fam = SaeFamily::new(Variant::TopkX8, &[seg.up(), seg.down()], model.config.d_model, sae, config.seed)?;
    fam.init_decoder_bias(&[x, y])?;
    let mut rng = RngState::new(config.seed ^ 0x6a5e);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let mut hist = JsaeHistory::default();
    let (wx, wy) = (fam.members[0].width, fam.members[1].width);
    for _ in 0..config.steps {
        let (bx, by) = paired_batch(x, y, config.batch_size, &mut rng);
        let mut tape = Tape::new();
        let vars = |tape: &mut Tape<S>, m: usize| {
            let st = &fam.stores[fam.members[m].store];
            SaeVars {
                w_enc: tape.param(st.w_enc.clone()),
                w_dec: tape.param(st.w_dec.clone()),
                b_enc: tape.param(fam.members[m].b_enc.clone()),
                b_dec: tape.param(fam.members[m].b_dec.clone()),
            }
        };
        let pair = PairVars {
            x: vars(&mut tape, 0),
            y: vars(&mut tape, 1),
            width_x: wx,
            width_y: wy,
            k: fam.k,
        };
        let xv = tape.constant(bx);
        let yv = tape.constant(by);
        let terms = jsae_loss(&mut tape, pair, &ff, xv, yv, lambda)?;
        let total = tape.value(terms.total).item().f64();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("JSAE loss at {seg:?}")));
        }
        hist.recon_x.push(tape.value(terms.recon_x).item().f64());
        hist.recon_y.push(tape.value(terms.recon_y).item().f64());
        hist.jac.push(tape.value(terms.jac).item().f64());
        let mut g = tape.backward(terms.total)?;
        let grads: Vec<Option<Tensor<S>>> = [pair.x, pair.y]
            .iter()
            .flat_map(|v| [v.w_enc, v.w_dec])
            .chain([pair.x, pair.y].iter().flat_map(|v| [v.b_enc, v.b_dec]))
            .map(|v| g.take(v))
            .collect();
        let grad_refs: Vec<Option<&Tensor<S>>> = grads.iter().map(Option::as_ref).collect();
        let mut params: Vec<&mut Tensor<S>> = Vec::new();
        for s in fam.stores.iter_mut() {
            params.push(&mut s.w_enc);
            params.push(&mut s.w_dec);
        }
        for m in fam.members.iter_mut() {
            params.push(&mut m.b_enc);
            params.push(&mut m.b_dec);
        }
        adam.step(&mut params, &grad_refs)?;
    }
    Ok((fam, hist))
}

/// Mean over the first `samples` rows of `x` of the active-block L1 norm,
/// with each upstream code taken from the pair's own encoder.
pub fn mean_jacobian_l1<S: Scalar>(model: &LmWeights<S>, seg: Segment, fam: &SaeFamily<S>, x: &Tensor<S>, samples: usize) -> Result<f64> {
    let ff = FfWeights::of(model, seg)?;
    let (sx, sy) = (fam.sae(0)?, fam.sae(1)?);
    let n = samples.min(x.shape()[0]);
    if n == 0 {
        return Err(Error::Empty("Jacobian evaluation samples"));
    }
    let mut total = 0.0;
    for r in 0..n {
        let code = sx.encode_row(x.row(r));
        total += jacobian(&sx, &sy, &ff, &code)?.l1();
    }
    Ok(total / n as f64)
}

/// One point of the penalty sweep, measured on held-out rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// `λ = 0`: the unpenalized baseline.
    pub is_baseline: bool,
    pub recon_x: f64,
    pub recon_y: f64,
    pub jac_l1: f64,
}

/// Trains one pair per coefficient on `train` rows and evaluates each on
/// `eval` rows.
pub fn lambda_sweep<S: Scalar>(
    model: &LmWeights<S>,
    seg: Segment,
    lambdas: &[f64],
    train: (&Tensor<S>, &Tensor<S>),
    eval: (&Tensor<S>, &Tensor<S>),
    sae: &SaeConfig,
    config: &JsaeTrainConfig,
) -> Result<Vec<SweepRow>> {
    let n = config.eval_samples.min(eval.0.shape()[0]);
    let ex = take_rows(eval.0, n)?;
    let ey = take_rows(eval.1, n)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let (fam, _) = train_jsae_pair(model, seg, lambda, train.0, train.1, sae, config)?;
            Ok(SweepRow {
                lambda,
                is_baseline: lambda == 0.0,
                recon_x: fam.sae(0)?.recon_loss(&ex)?,
                recon_y: fam.sae(1)?.recon_loss(&ey)?,
                jac_l1: mean_jacobian_l1(model, seg, &fam, &ex, n)?,
            })
        })
        .collect()
}

fn take_rows<S: Scalar>(x: &Tensor<S>, n: usize) -> Result<Tensor<S>> {
    let d = x.shape()[1];
    Tensor::new(vec![n, d], x.data()[..n * d].to_vec())
}
