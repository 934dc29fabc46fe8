use serde::{Deserialize, Serialize};

use super::{Corpus, LmConfig, LmWeights, Params, Split};
use crate::error::{Error, Result};
use crate::tensor::{cross_entropy, AdamConfig, AdamState, RngState, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Validation cadence in steps; 0 evaluates only before and after training.
    pub eval_every: usize,
    /// Validation windows used for each evaluation.
    pub eval_windows: usize,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 900,
            batch_size: 8,
            seq_len: 64,
            lr: 3e-3,
            weight_decay: 0.1,
            warmup_steps: 100,
            grad_clip: 1.0,
            eval_every: 100,
            eval_windows: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// `(step, validation loss)`; step 0 is before any update.
    pub val_loss: Vec<(usize, f64)>,
}

impl TrainHistory {
    pub fn initial_val(&self) -> Option<f64> {
        self.val_loss.first().map(|v| v.1)
    }

    pub fn final_val(&self) -> Option<f64> {
        self.val_loss.last().map(|v| v.1)
    }
}

/// Mean next-token cross-entropy over the first `windows` windows of a split.
pub fn evaluate<S: Scalar>(w: &LmWeights<S>, corpus: &Corpus, split: Split, windows: usize, seq_len: usize) -> Result<f64> {
    let n = windows.min(corpus.blocks(split).len());
    if n == 0 {
        return Err(Error::Empty("evaluation windows"));
    }
    let mut total = 0.0;
    for i in 0..n {
        let win = corpus.window(split, i, seq_len)?;
        let logits = w.forward(&win[..seq_len])?;
        let targets: Vec<usize> = win[1..].iter().map(|&t| t as usize).collect();
        total += cross_entropy(&logits, &targets)?.f64();
    }
    Ok(total / n as f64)
}

/// Records the LM loss for a batch of windows (each `t + 1` tokens) on a tape.
pub(crate) fn tape_loss<S: Scalar>(
    tape: &mut Tape<S>,
    v: &Params<Var>,
    config: &LmConfig,
    windows: &[&[u32]],
) -> Result<Var> {
    let b = windows.len();
    let t = windows.first().map(|w| w.len().saturating_sub(1)).unwrap_or(0);
    if b == 0 || t == 0 {
        return Err(Error::Empty("training batch"));
    }
    if windows.iter().any(|w| w.len() != t + 1) {
        return Err(Error::invalid("windows in a batch must share one length"));
    }
    if t > config.context {
        return Err(Error::OutOfRange {
            what: "sequence length",
            index: t,
            limit: config.context,
        });
    }
    let mut toks = Vec::with_capacity(b * t);
    let mut targets = Vec::with_capacity(b * t);
    for w in windows {
        for i in 0..t {
            if w[i] as usize >= config.vocab || w[i + 1] as usize >= config.vocab {
                return Err(Error::OutOfRange {
                    what: "token id",
                    index: w[i].max(w[i + 1]) as usize,
                    limit: config.vocab,
                });
            }
            toks.push(w[i] as usize);
            targets.push(w[i + 1] as usize);
        }
    }
    let pos: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let e = tape.gather_rows(v.wte, &toks)?;
    let p = tape.gather_rows(v.wpe, &pos)?;
    let mut x = tape.add(e, p)?;
    for l in &v.layers {
        let h = tape.dyt(x, l.norm1.alpha, l.norm1.gamma, l.norm1.beta)?;
        let lin = |tape: &mut Tape<S>, x: Var, w: Var, bias: Var| -> Result<Var> {
            let y = tape.matmul_nt(x, w)?;
            tape.add_row(y, bias)
        };
        let q = lin(tape, h, l.w_q, l.b_q)?;
        let k = lin(tape, h, l.w_k, l.b_k)?;
        let vv = lin(tape, h, l.w_v, l.b_v)?;
        let o = tape.attention(q, k, vv, b, t, config.n_heads)?;
        let a = lin(tape, o, l.w_o, l.b_o)?;
        let mid = tape.add(x, a)?;
        let u = tape.dyt(mid, l.norm2.alpha, l.norm2.gamma, l.norm2.beta)?;
        let z = lin(tape, u, l.w1, l.b1)?;
        let z = tape.gelu(z);
        let f = lin(tape, z, l.w2, l.b2)?;
        x = tape.add(mid, f)?;
    }
    let h = tape.dyt(x, v.norm_f.alpha, v.norm_f.gamma, v.norm_f.beta)?;
    let logits = tape.matmul(h, v.w_u)?;
    tape.cross_entropy(logits, &targets)
}

/// Loss and gradients for a batch of windows.
pub fn lm_loss_and_grads<S: Scalar>(w: &LmWeights<S>, windows: &[&[u32]]) -> Result<(S, Params<Tensor<S>>)> {
    let mut tape = Tape::new();
    let vars = w.params.map(|_, t| tape.param(t.clone()));
    let loss = tape_loss(&mut tape, &vars, &w.config, windows)?;
    let grads = tape.backward(loss)?;
    let g = vars.map(|_, &v| {
        grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    });
    Ok((tape.value(loss).item(), g))
}

fn lr_at(step: usize, c: &LmTrainConfig) -> f64 {
    if step < c.warmup_steps {
        return c.lr * (step + 1) as f64 / c.warmup_steps as f64;
    }
    let span = c.steps.saturating_sub(c.warmup_steps).max(1) as f64;
    let progress = (step - c.warmup_steps) as f64 / span;
    c.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Trains from a fresh init with Adam on next-token cross-entropy.
/// Deterministic for a fixed pair of seeds.
pub fn train_lm<S: Scalar>(
    corpus: &Corpus,
    lm: &LmConfig,
    c: &LmTrainConfig,
) -> Result<(LmWeights<S>, TrainHistory)> {
    if c.steps == 0 || c.batch_size == 0 || c.seq_len == 0 {
        return Err(Error::Config("steps, batch_size and seq_len must be positive".into()));
    }
    if c.seq_len + 1 > corpus.block_len {
        return Err(Error::Config(format!(
            "seq_len {} does not fit the corpus blocks of {}",
            c.seq_len, corpus.block_len
        )));
    }
    let mut w = LmWeights::<S>::init(lm)?;
    let mut rng = RngState::new(c.seed);
    let mut adam = AdamState::new(AdamConfig {
        weight_decay: c.weight_decay,
        ..AdamConfig::with_lr(c.lr)
    });
    let mut hist = TrainHistory::default();
    let eval = |w: &LmWeights<S>| evaluate(w, corpus, Split::Val, c.eval_windows, c.seq_len);
    hist.val_loss.push((0, eval(&w)?));

    for step in 0..c.steps {
        let batch: Vec<&[u32]> = (0..c.batch_size).map(|_| corpus.sample_train(c.seq_len, &mut rng)).collect();
        let (loss, mut grads) = lm_loss_and_grads(&w, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("LM loss at step {step}")));
        }
        hist.train_loss.push(loss.f64());
        if c.grad_clip > 0.0 {
            let mut sq = 0.0;
            grads.visit(|_, g| sq += g.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>());
            let norm = sq.sqrt();
            if norm > c.grad_clip {
                let s = S::of(c.grad_clip / norm);
                grads.visit_mut(|_, g| g.data_mut().iter_mut().for_each(|x| *x *= s));
            }
        }
        adam.config.lr = lr_at(step, c);
        let g: Vec<Option<&Tensor<S>>> = grads.leaves().into_iter().map(Some).collect();
        adam.step(&mut w.params.leaves_mut(), &g)?;
        if (c.eval_every > 0 && (step + 1) % c.eval_every == 0) || step + 1 == c.steps {
            hist.val_loss.push((step + 1, eval(&w)?));
        }
    }
    Ok((w, hist))
}
