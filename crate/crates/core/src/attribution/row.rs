//! One segment applied to a single position, with forward-mode derivatives
//! along a few input directions. For a transformer block the other
//! positions are a fixed context.

use crate::error::{Error, Result};
use crate::jsae::FfWeights;
use crate::lm::{LmWeights, Segment};
use crate::tensor::{kernels, Scalar, Tensor};

/// Keys and values of the positions before the current one.
#[derive(Clone, Debug)]
pub(crate) struct AttnContext<S> {
    pub keys: Vec<S>,
    pub values: Vec<S>,
    pub len: usize,
}

impl<S: Scalar> AttnContext<S> {
    /// Keys and values of rows `..p` of `x` under block `k`'s attention.
    pub fn build(model: &LmWeights<S>, k: usize, x: &Tensor<S>, p: usize) -> Self {
        let l = &model.params.layers[k];
        let d = model.config.d_model;
        let mut h = vec![S::zero(); d];
        let mut keys = vec![S::zero(); p * d];
        let mut values = vec![S::zero(); p * d];
        for q in 0..p {
            kernels::dyt_row(x.row(q), l.norm1.alpha.data(), l.norm1.gamma.data(), l.norm1.beta.data(), &mut h);
            kernels::linear_row(l.w_k.data(), Some(l.b_k.data()), &h, &mut keys[q * d..(q + 1) * d]);
            kernels::linear_row(l.w_v.data(), Some(l.b_v.data()), &h, &mut values[q * d..(q + 1) * d]);
        }
        Self { keys, values, len: p }
    }
}

/// `y = seg(x)` at one position and `J·dir` for every direction.
pub(crate) fn forward_jvp<S: Scalar>(
    model: &LmWeights<S>,
    seg: Segment,
    ctx: Option<&AttnContext<S>>,
    x: &[S],
    dirs: &[Vec<S>],
) -> Result<(Vec<S>, Vec<Vec<S>>)> {
    match seg {
        Segment::FfLayer(_) | Segment::FfBlock(_) => {
            let ff = FfWeights::of(model, seg)?;
            Ok(ff_jvp(&ff, x, dirs))
        }
        Segment::TransformerBlock(k) => {
            let ctx = ctx.ok_or_else(|| Error::invalid("a transformer block needs its attention context"))?;
            Ok(block_jvp(model, k, ctx, x, dirs))
        }
    }
}

fn ff_jvp<S: Scalar>(ff: &FfWeights<'_, S>, x: &[S], dirs: &[Vec<S>]) -> (Vec<S>, Vec<Vec<S>>) {
    let (d, m) = (ff.d_model(), ff.d_mlp());
    let u = ff.mlp_input(x);
    let mut z = vec![S::zero(); m];
    kernels::linear_row(ff.w1.data(), Some(ff.b1.data()), &u, &mut z);
    let phi: Vec<S> = z.iter().map(|&v| kernels::gelu_grad(v)).collect();
    let a: Vec<S> = z.iter().map(|&v| kernels::gelu(v)).collect();
    let mut y = vec![S::zero(); d];
    kernels::linear_row(ff.w2.data(), Some(ff.b2.data()), &a, &mut y);
    let block = ff.kind == crate::jsae::PairKind::Block;
    let mut dh = vec![S::zero(); d];
    if block {
        y.iter_mut().zip(x).for_each(|(o, &xi)| *o += xi);
        let n = ff.norm;
        kernels::dyt_grad_row(x, n.alpha.data(), n.gamma.data(), &mut dh);
    }
    let mut dz = vec![S::zero(); m];
    let outs = dirs
        .iter()
        .map(|dx| {
            let du: Vec<S> = if block { dx.iter().zip(&dh).map(|(&a, &b)| a * b).collect() } else { dx.clone() };
            kernels::linear_row(ff.w1.data(), None, &du, &mut dz);
            dz.iter_mut().zip(&phi).for_each(|(v, &p)| *v *= p);
            let mut dy = vec![S::zero(); d];
            kernels::linear_row(ff.w2.data(), None, &dz, &mut dy);
            if block {
                dy.iter_mut().zip(dx).for_each(|(o, &v)| *o += v);
            }
            dy
        })
        .collect();
    (y, outs)
}

fn block_jvp<S: Scalar>(model: &LmWeights<S>, k: usize, ctx: &AttnContext<S>, x: &[S], dirs: &[Vec<S>]) -> (Vec<S>, Vec<Vec<S>>) {
    let l = &model.params.layers[k];
    let d = model.config.d_model;
    let heads = model.config.n_heads;
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let p = ctx.len;

    let mut h = vec![S::zero(); d];
    kernels::dyt_row(x, l.norm1.alpha.data(), l.norm1.gamma.data(), l.norm1.beta.data(), &mut h);
    let mut g1 = vec![S::zero(); d];
    kernels::dyt_grad_row(x, l.norm1.alpha.data(), l.norm1.gamma.data(), &mut g1);
    let lin = |w: &Tensor<S>, b: Option<&Tensor<S>>, v: &[S]| {
        let mut o = vec![S::zero(); w.shape()[0]];
        kernels::linear_row(w.data(), b.map(|b| b.data()), v, &mut o);
        o
    };
    let q = lin(&l.w_q, Some(&l.b_q), &h);
    let kp = lin(&l.w_k, Some(&l.b_k), &h);
    let vp = lin(&l.w_v, Some(&l.b_v), &h);
    let key = |j: usize, off: usize| if j < p { &ctx.keys[j * d + off..j * d + off + dh] } else { &kp[off..off + dh] };
    let val = |j: usize, off: usize| if j < p { &ctx.values[j * d + off..j * d + off + dh] } else { &vp[off..off + dh] };

    // Attention weights per head over positions 0..=p.
    let mut probs = vec![S::zero(); heads * (p + 1)];
    let mut o = vec![S::zero(); d];
    for hd in 0..heads {
        let off = hd * dh;
        let pr = &mut probs[hd * (p + 1)..(hd + 1) * (p + 1)];
        for (j, s) in pr.iter_mut().enumerate() {
            *s = kernels::dot(&q[off..off + dh], key(j, off)) * scale;
        }
        kernels::softmax_in_place(pr);
        for (j, &w) in pr.iter().enumerate() {
            kernels::axpy(w, val(j, off), &mut o[off..off + dh]);
        }
    }
    let attn = lin(&l.w_o, Some(&l.b_o), &o);
    let mid: Vec<S> = x.iter().zip(&attn).map(|(&a, &b)| a + b).collect();
    let ff = FfWeights::of(model, crate::lm::Segment::FfBlock(k)).expect("layer exists");
    let (y, _) = ff_jvp(&ff, &mid, &[]);

    let mut dmids = Vec::with_capacity(dirs.len());
    for dx in dirs {
        let dhv: Vec<S> = dx.iter().zip(&g1).map(|(&a, &b)| a * b).collect();
        let dq = lin(&l.w_q, None, &dhv);
        let dk = lin(&l.w_k, None, &dhv);
        let dv = lin(&l.w_v, None, &dhv);
        let mut d_o = vec![S::zero(); d];
        let mut ds = vec![S::zero(); p + 1];
        for hd in 0..heads {
            let off = hd * dh;
            let pr = &probs[hd * (p + 1)..(hd + 1) * (p + 1)];
            for (j, s) in ds.iter_mut().enumerate() {
                *s = kernels::dot(&dq[off..off + dh], key(j, off)) * scale;
            }
            ds[p] += kernels::dot(&q[off..off + dh], &dk[off..off + dh]) * scale;
            let mean = pr.iter().zip(&ds).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
            let out = &mut d_o[off..off + dh];
            for (j, (&w, &s)) in pr.iter().zip(&ds).enumerate() {
                kernels::axpy(w * (s - mean), val(j, off), out);
            }
            kernels::axpy(pr[p], &dv[off..off + dh], out);
        }
        let da = lin(&l.w_o, None, &d_o);
        dmids.push(dx.iter().zip(&da).map(|(&a, &b)| a + b).collect::<Vec<S>>());
    }
    let (_, dys) = ff_jvp(&ff, &mid, &dmids);
    (y, dys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::tensor::RngState;

    fn model() -> LmWeights<f64> {
        let cfg = LmConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 12,
            context: 8,
            init_std: 0.5,
            seed: 9,
            ..LmConfig::default()
        };
        let mut w = LmWeights::init(&cfg).unwrap();
        let mut rng = RngState::new(1);
        for l in &mut w.params.layers {
            l.b_q = Tensor::randn([8], 0.2, &mut rng);
            l.b_k = Tensor::randn([8], 0.2, &mut rng);
            l.norm1.alpha = Tensor::from_fn([8], |i| 0.3 + 0.05 * i as f64);
            l.norm2.gamma = Tensor::randn([8], 1.0, &mut rng);
        }
        w
    }

    #[test]
    fn row_forward_matches_full_segment() {
        let w = model();
        let mut rng = RngState::new(2);
        let x = Tensor::<f64>::randn([6, 8], 1.0, &mut rng);
        for seg in [Segment::FfLayer(1), Segment::FfBlock(0), Segment::TransformerBlock(1)] {
            let full = w.segment(seg, &x).unwrap();
            for p in 0..6 {
                let ctx = AttnContext::build(&w, seg.layer(), &x, p);
                let (y, _) = forward_jvp(&w, seg, Some(&ctx), x.row(p), &[]).unwrap();
                for (a, b) in y.iter().zip(full.row(p)) {
                    assert_eq!(a, b, "{seg} position {p}");
                }
            }
        }
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let w = model();
        let mut rng = RngState::new(3);
        let x = Tensor::<f64>::randn([5, 8], 1.0, &mut rng);
        let dirs: Vec<Vec<f64>> = (0..3).map(|_| Tensor::<f64>::randn([8], 1.0, &mut rng).into_data()).collect();
        let h = 1e-6;
        for seg in [Segment::FfLayer(0), Segment::FfBlock(1), Segment::TransformerBlock(0), Segment::TransformerBlock(1)] {
            for p in [0, 2, 4] {
                let ctx = AttnContext::build(&w, seg.layer(), &x, p);
                let (_, dys) = forward_jvp(&w, seg, Some(&ctx), x.row(p), &dirs).unwrap();
                for (dir, dy) in dirs.iter().zip(&dys) {
                    let shift = |s: f64| {
                        let xs: Vec<f64> = x.row(p).iter().zip(dir).map(|(&a, &b)| a + s * b).collect();
                        forward_jvp(&w, seg, Some(&ctx), &xs, &[]).unwrap().0
                    };
                    let (fp, fm) = (shift(h), shift(-h));
                    for c in 0..8 {
                        let fd = (fp[c] - fm[c]) / (2.0 * h);
                        let err = (fd - dy[c]).abs() / fd.abs().max(dy[c].abs()).max(1e-3);
                        assert!(err < 1e-6, "{seg} p {p}: {fd} vs {}", dy[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn transformer_block_requires_context() {
        let w = model();
        assert!(forward_jvp(&w, Segment::TransformerBlock(0), None, &[0.0; 8], &[]).is_err());
    }
}
