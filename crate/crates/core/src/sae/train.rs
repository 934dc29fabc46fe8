use serde::{Deserialize, Serialize};

use super::{code_from_pre, SaeFamily, SaeRef};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, RngState, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeTrainConfig {
    /// Rounds; each round takes one optimizer step per member.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 256,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Per-round batch losses, `loss[round][member]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SaeHistory {
    pub loss: Vec<Vec<f64>>,
}

impl SaeHistory {
    /// Mean loss over the last `n` rounds for each member.
    pub fn tail_mean(&self, n: usize) -> Vec<f64> {
        let tail = &self.loss[self.loss.len().saturating_sub(n)..];
        let m = tail.first().map_or(0, Vec::len);
        (0..m)
            .map(|j| tail.iter().map(|r| r[j]).sum::<f64>() / tail.len() as f64)
            .collect()
    }
}

/// Gradients of one member's loss, shaped like its store and biases.
#[derive(Clone, Debug)]
pub struct ReconGrads<S> {
    pub w_enc: Tensor<S>,
    pub w_dec: Tensor<S>,
    pub b_enc: Tensor<S>,
    pub b_dec: Tensor<S>,
}

/// Mean over rows of `‖h − h'‖²` and its gradient, exploiting that only
/// `K` latents per row are non-zero. Store features below `grad_from` get
/// zero gradient; the TopK selection is held fixed.
pub fn recon_loss_and_grads<S: Scalar>(sae: &SaeRef<'_, S>, grad_from: usize, x: &Tensor<S>) -> Result<(f64, ReconGrads<S>)> {
    let (b, d) = x.dims2()?;
    if b == 0 {
        return Err(Error::Empty("SAE batch"));
    }
    let total = sae.w_enc.shape()[0];
    let mut pre = sae.pre_activations(x)?;
    let mut g = ReconGrads {
        w_enc: Tensor::zeros([total, d]),
        w_dec: Tensor::zeros([d, total]),
        b_enc: Tensor::zeros([sae.width]),
        b_dec: Tensor::zeros([d]),
    };
    let scale = S::of(2.0 / b as f64);
    let mut loss = 0.0;
    let mut recon = vec![S::zero(); d];
    let wd = sae.w_dec.data();
    for (r, row) in pre.data_mut().chunks_mut(sae.width).enumerate() {
        let code = code_from_pre(row, sae.k);
        let h = x.row(r);
        sae.decode_sparse(&code, &mut recon);
        let ge: Vec<S> = recon.iter().zip(h).map(|(&a, &t)| a - t).collect();
        loss += ge.iter().map(|e| e.f64() * e.f64()).sum::<f64>();
        let ge: Vec<S> = ge.into_iter().map(|e| e * scale).collect();
        for (c, &e) in ge.iter().enumerate() {
            g.b_dec.data_mut()[c] += e;
        }
        for (&j, &z) in code.idx.iter().zip(&code.val) {
            let mut dz = S::zero();
            for c in 0..d {
                dz += wd[c * total + j] * ge[c];
            }
            g.b_enc.data_mut()[j] += dz;
            let we = sae.w_enc.row(j);
            for c in 0..d {
                g.b_dec.data_mut()[c] -= dz * we[c];
            }
            if j >= grad_from {
                let gdec = g.w_dec.data_mut();
                for c in 0..d {
                    gdec[c * total + j] += ge[c] * z;
                }
                let genc = g.w_enc.row_mut(j);
                for c in 0..d {
                    genc[c] += dz * (h[c] - sae.b_dec[c]);
                }
            }
        }
    }
    Ok((loss / b as f64, g))
}

/// Tape handles for one SAE's parameters.
#[derive(Clone, Copy, Debug)]
pub struct SaeVars {
    pub w_enc: Var,
    pub w_dec: Var,
    pub b_enc: Var,
    pub b_dec: Var,
}

/// Latents and reconstruction of `x` recorded on the tape. The TopK mask is
/// computed from current values and enters as a constant.
pub(crate) fn tape_encode_decode<S: Scalar>(
    tape: &mut Tape<S>,
    v: SaeVars,
    width: usize,
    grad_from: usize,
    k: usize,
    x: Var,
) -> Result<(Var, Var, Vec<Vec<usize>>)> {
    let we = tape.slice_rows(v.w_enc, width, grad_from)?;
    let wd = tape.slice_cols(v.w_dec, width, grad_from)?;
    let c = tape.sub_row(x, v.b_dec)?;
    let pre = tape.matmul_nt(c, we)?;
    let pre = tape.add_row(pre, v.b_enc)?;
    let mut vals = tape.value(pre).data().to_vec();
    let mut active = Vec::new();
    for row in vals.chunks_mut(width) {
        let code = code_from_pre(row, k);
        row.iter_mut().for_each(|m| *m = S::zero());
        for &j in &code.idx {
            row[j] = S::one();
        }
        active.push(code.idx);
    }
    let z = tape.mask(pre, vals)?;
    let recon = tape.matmul_nt(z, wd)?;
    let recon = tape.add_row(recon, v.b_dec)?;
    Ok((z, recon, active))
}

/// Mean over rows of `‖x − x'‖²` recorded on the tape.
pub fn tape_recon_loss<S: Scalar>(
    tape: &mut Tape<S>,
    v: SaeVars,
    width: usize,
    grad_from: usize,
    k: usize,
    x: Var,
) -> Result<Var> {
    let rows = tape.value(x).shape()[0];
    let (_, recon, _) = tape_encode_decode(tape, v, width, grad_from, k, x)?;
    let e = tape.sub(recon, x)?;
    let sq = tape.square(e);
    let s = tape.sum(sq);
    Ok(tape.scale(s, S::of(1.0 / rows as f64)))
}

fn sample_batch<S: Scalar>(x: &Tensor<S>, batch: usize, rng: &mut RngState) -> Tensor<S> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(batch * d);
    for _ in 0..batch {
        out.extend_from_slice(x.row(rng.below(n)));
    }
    Tensor::new(vec![batch, d], out).expect("batch shape")
}

/// Trains every member on its own dataset. Members take turns, one batch
/// and one step of a single shared Adam state each, so shared features see
/// gradients from every member that can reach them.
pub fn train_family<S: Scalar>(fam: &mut SaeFamily<S>, data: &[&Tensor<S>], config: &SaeTrainConfig) -> Result<SaeHistory> {
    fam.check_data(data)?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = RngState::new(config.seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let ns = fam.stores.len();
    let mut hist = SaeHistory::default();
    for _ in 0..config.steps {
        let mut round = Vec::with_capacity(fam.members.len());
        for m in 0..fam.members.len() {
            let batch = sample_batch(data[m], config.batch_size, &mut rng);
            let grad_from = fam.members[m].grad_from;
            let (loss, g) = recon_loss_and_grads(&fam.sae(m)?, grad_from, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("SAE loss for {}", fam.members[m].site)));
            }
            round.push(loss);
            let store = fam.members[m].store;
            let mut grads: Vec<Option<&Tensor<S>>> = vec![None; 2 * ns + 2 * fam.members.len()];
            grads[2 * store] = Some(&g.w_enc);
            grads[2 * store + 1] = Some(&g.w_dec);
            grads[2 * ns + 2 * m] = Some(&g.b_enc);
            grads[2 * ns + 2 * m + 1] = Some(&g.b_dec);
            let mut params: Vec<&mut Tensor<S>> = Vec::new();
            for s in fam.stores.iter_mut() {
                params.push(&mut s.w_enc);
                params.push(&mut s.w_dec);
            }
            for mem in fam.members.iter_mut() {
                params.push(&mut mem.b_enc);
                params.push(&mut mem.b_dec);
            }
            adam.step(&mut params, &grads)?;
        }
        hist.loss.push(round);
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Site;
    use crate::sae::{SaeConfig, Variant};
    use crate::tensor::{grad_check, GradCheckConfig};

    fn toy(variant: Variant, sites: &[Site], seed: u64) -> SaeFamily<f64> {
        let mut f = SaeFamily::new(variant, sites, 4, &SaeConfig { k: 2, expansion: 2, wide_expansion: 3 }, seed).unwrap();
        let mut rng = RngState::new(seed ^ 77);
        for m in &mut f.members {
            m.b_enc = Tensor::randn([m.width], 0.2, &mut rng);
            m.b_dec = Tensor::randn([4], 0.2, &mut rng);
        }
        f
    }

    fn tape_grads(f: &SaeFamily<f64>, m: usize, x: &Tensor<f64>) -> (f64, Vec<Tensor<f64>>) {
        let mem = &f.members[m];
        let st = &f.stores[mem.store];
        let mut tape = Tape::new();
        let v = SaeVars {
            w_enc: tape.param(st.w_enc.clone()),
            w_dec: tape.param(st.w_dec.clone()),
            b_enc: tape.param(mem.b_enc.clone()),
            b_dec: tape.param(mem.b_dec.clone()),
        };
        let xv = tape.constant(x.clone());
        let loss = tape_recon_loss(&mut tape, v, mem.width, mem.grad_from, f.k, xv).unwrap();
        let mut g = tape.backward(loss).unwrap();
        let out = [v.w_enc, v.w_dec, v.b_enc, v.b_dec]
            .map(|p| g.take(p).unwrap_or_else(|| Tensor::zeros(tape.value(p).shape().to_vec())));
        (tape.value(loss).item(), out.to_vec())
    }

    #[test]
    fn sparse_gradients_match_tape() {
        let sites = [Site::ResidPre(0), Site::ResidPre(1), Site::ResidPre(2)];
        for variant in [Variant::TopkX8, Variant::StaircaseX8, Variant::StaircaseDetach] {
            let f = toy(variant, &sites, 3);
            let mut rng = RngState::new(11);
            let x = Tensor::randn([7, 4], 1.0, &mut rng);
            for m in 0..3 {
                let (l, g) = recon_loss_and_grads(&f.sae(m).unwrap(), f.members[m].grad_from, &x).unwrap();
                let (lt, gt) = tape_grads(&f, m, &x);
                assert!((l - lt).abs() < 1e-12);
                for (a, b) in [&g.w_enc, &g.w_dec, &g.b_enc, &g.b_dec].into_iter().zip(&gt) {
                    assert!(a.max_abs_diff(b) < 1e-12, "{variant} member {m}");
                }
            }
        }
    }

    #[test]
    fn recon_loss_passes_grad_check() {
        // Twenty random toys; FD stays away from TopK switches because the
        // selection margin is checked first.
        let mut checked = 0;
        for seed in 0..60u64 {
            let f = toy(Variant::TopkX8, &[Site::ResidPre(0)], seed);
            let mut rng = RngState::new(seed + 100);
            let x = Tensor::randn([3, 4], 1.0, &mut rng);
            if !selection_margin_ok(&f, &x, 1e-3) {
                continue;
            }
            let m = &f.members[0];
            let params = vec![f.stores[0].w_enc.clone(), f.stores[0].w_dec.clone(), m.b_enc.clone(), m.b_dec.clone()];
            let (width, k) = (m.width, f.k);
            let report = grad_check(
                &params,
                |p| {
                    let mut tape = Tape::new();
                    let v = SaeVars {
                        w_enc: tape.param(p[0].clone()),
                        w_dec: tape.param(p[1].clone()),
                        b_enc: tape.param(p[2].clone()),
                        b_dec: tape.param(p[3].clone()),
                    };
                    let xv = tape.constant(x.clone());
                    let loss = tape_recon_loss(&mut tape, v, width, 0, k, xv)?;
                    let mut g = tape.backward(loss)?;
                    let grads = [v.w_enc, v.w_dec, v.b_enc, v.b_dec]
                        .iter()
                        .zip(p)
                        .map(|(&var, t)| g.take(var).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                        .collect();
                    Ok((tape.value(loss).item(), grads))
                },
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report.max_rel_err());
            checked += 1;
            if checked == 20 {
                break;
            }
        }
        assert_eq!(checked, 20);
    }

    /// True when, for every row, the K-th and (K+1)-th pre-activations and
    /// the smallest active value's distance from zero all exceed `margin`.
    pub(crate) fn selection_margin_ok(f: &SaeFamily<f64>, x: &Tensor<f64>, margin: f64) -> bool {
        let pre = f.sae(0).unwrap().pre_activations(x).unwrap();
        let ok = pre.rows().all(|r| {
            let mut v = r.to_vec();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let k = f.k;
            let gap = if k < v.len() { v[k - 1] - v[k] } else { f64::INFINITY };
            gap > margin && v.iter().all(|x| x.abs() > margin)
        });
        ok
    }

    #[test]
    fn detached_member_sends_no_gradient_to_earlier_chunks() {
        let sites = [Site::ResidPre(0), Site::ResidPre(1), Site::ResidPre(2)];
        let f = toy(Variant::StaircaseDetach, &sites, 5);
        let mut rng = RngState::new(2);
        let x = Tensor::randn([16, 4], 1.0, &mut rng);
        let (n, d) = (8, 4);
        let m = 2; // index 3
        let (_, g) = recon_loss_and_grads(&f.sae(m).unwrap(), f.members[m].grad_from, &x).unwrap();
        assert!(g.w_enc.data()[..2 * n * d].iter().all(|&v| v == 0.0));
        for row in g.w_dec.rows() {
            assert!(row[..2 * n].iter().all(|&v| v == 0.0));
        }
        assert!(g.w_enc.data()[2 * n * d..].iter().any(|&v| v != 0.0));
        // The shared variant does send gradient there.
        let f = toy(Variant::StaircaseX8, &sites, 5);
        let (_, g) = recon_loss_and_grads(&f.sae(m).unwrap(), 0, &x).unwrap();
        assert!(g.w_enc.data()[..2 * n * d].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn loss_decreases_on_linear_data() {
        // Data on a random 3-dim subspace of R^8 with sparse non-negative
        // coefficients.
        let mut rng = RngState::new(4);
        let basis = Tensor::<f64>::randn([3, 8], 1.0, &mut rng);
        let x = Tensor::from_fn([512, 8], |i| {
            let (r, c) = (i / 8, i % 8);
            (0..3).map(|b| ((r * 7 + b * 3) % 5) as f64 * 0.3 * basis.data()[b * 8 + c]).sum()
        });
        let mut f = SaeFamily::<f64>::new(Variant::TopkX8, &[Site::ResidPre(0)], 8, &SaeConfig { k: 3, expansion: 2, wide_expansion: 2 }, 0).unwrap();
        f.init_decoder_bias(&[&x]).unwrap();
        let cfg = SaeTrainConfig {
            steps: 400,
            batch_size: 32,
            lr: 1e-2,
            seed: 1,
        };
        let h = train_family(&mut f, &[&x], &cfg).unwrap();
        // Smoothed over windows of 50 rounds.
        let windows: Vec<f64> = h.loss.chunks(50).map(|c| c.iter().map(|r| r[0]).sum::<f64>() / c.len() as f64).collect();
        for w in windows.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "{windows:?}");
        }
        assert!(windows.last().unwrap() < &(0.5 * windows[0]), "{windows:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let sites = [Site::ResidPre(0), Site::ResidPre(1)];
        let mut rng = RngState::new(8);
        let a = Tensor::<f32>::randn([64, 4], 1.0, &mut rng);
        let b = Tensor::<f32>::randn([64, 4], 1.0, &mut rng);
        let run = || {
            let mut f = SaeFamily::<f32>::new(Variant::StaircaseX8, &sites, 4, &SaeConfig { k: 2, expansion: 2, wide_expansion: 3 }, 1).unwrap();
            f.init_decoder_bias(&[&a, &b]).unwrap();
            let cfg = SaeTrainConfig { steps: 20, batch_size: 8, ..SaeTrainConfig::default() };
            let h = train_family(&mut f, &[&a, &b], &cfg).unwrap();
            (f, h)
        };
        assert_eq!(run(), run());
    }
}
