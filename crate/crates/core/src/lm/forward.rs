//! Tape-free inference with activation hooks, early stopping at a site,
//! and resumption from a spliced activation.

use serde::{Deserialize, Serialize};

use super::{DytParams, LmWeights, Site};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tensor};

/// Residual values recorded during a forward pass, needed to resume from
/// sites inside the MLP sublayer.
#[derive(Clone, Debug)]
pub struct Trace<S> {
    mids: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Trace<S> {
    /// Residual stream after attention in block `k`.
    pub fn mid(&self, k: usize) -> Option<&Tensor<S>> {
        self.mids.get(k).and_then(Option::as_ref)
    }
}

/// A model span between two activation sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layer", rename_all = "snake_case")]
pub enum Segment {
    /// `FfLayerIn(k) → FfLayerOut(k)`: the MLP alone.
    FfLayer(usize),
    /// `FfBlockIn(k) → FfBlockOut(k)`: `x + MLP(DyT(x))`.
    FfBlock(usize),
    /// `ResidPre(k) → ResidPost(k)`: attention and MLP sublayers.
    TransformerBlock(usize),
}

impl Segment {
    pub fn layer(self) -> usize {
        match self {
            Segment::FfLayer(k) | Segment::FfBlock(k) | Segment::TransformerBlock(k) => k,
        }
    }

    pub fn up(self) -> Site {
        match self {
            Segment::FfLayer(k) => Site::FfLayerIn(k),
            Segment::FfBlock(k) => Site::FfBlockIn(k),
            Segment::TransformerBlock(k) => Site::ResidPre(k),
        }
    }

    pub fn down(self) -> Site {
        match self {
            Segment::FfLayer(k) => Site::FfLayerOut(k),
            Segment::FfBlock(k) => Site::FfBlockOut(k),
            Segment::TransformerBlock(k) => Site::ResidPost(k),
        }
    }

    /// Whether each output row depends only on the same input row.
    pub fn is_positionwise(self) -> bool {
        !matches!(self, Segment::TransformerBlock(_))
    }

    pub fn family(self) -> &'static str {
        match self {
            Segment::FfLayer(_) => "ff_layer",
            Segment::FfBlock(_) => "ff_block",
            Segment::TransformerBlock(_) => "transformer_block",
        }
    }
}

impl std::fmt::Display for Segment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.family(), self.layer())
    }
}

enum Outcome<S> {
    Stopped(Tensor<S>, Trace<S>),
    Logits(Tensor<S>),
}

type Hook<'h, S> = &'h mut dyn FnMut(Site, &mut Tensor<S>) -> Result<()>;

/// `x·Wᵀ + b` over rows, `W` stored `[out × in]`.
pub(crate) fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Tensor<S> {
    let (r, d_in) = (x.numel() / x.last_dim().max(1), x.last_dim());
    let d_out = w.shape()[0];
    debug_assert_eq!(w.shape()[1], d_in);
    let mut out = vec![S::zero(); r * d_out];
    kernels::matmul_nt(x.data(), w.data(), &mut out, r, d_in, d_out);
    if let Some(b) = b {
        for row in out.chunks_mut(d_out) {
            for (o, &bi) in row.iter_mut().zip(b.data()) {
                *o = *o + bi;
            }
        }
    }
    Tensor::new(vec![r, d_out], out).expect("linear shape")
}

pub(crate) fn dyt<S: Scalar>(p: &DytParams<Tensor<S>>, x: &Tensor<S>) -> Tensor<S> {
    let d = x.last_dim();
    let mut out = vec![S::zero(); x.numel()];
    for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        kernels::dyt_row(xr, p.alpha.data(), p.gamma.data(), p.beta.data(), or);
    }
    Tensor::new(x.shape().to_vec(), out).expect("dyt shape")
}

fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("add shape")
}

impl<S: Scalar> LmWeights<S> {
    /// Token plus position embedding, `[t × d_model]`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor<S>> {
        let c = &self.config;
        if tokens.len() > c.context {
            return Err(Error::OutOfRange {
                what: "sequence length",
                index: tokens.len(),
                limit: c.context,
            });
        }
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let d = c.d_model;
        let mut out = vec![S::zero(); tokens.len() * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= c.vocab {
                return Err(Error::OutOfRange {
                    what: "token id",
                    index: tok,
                    limit: c.vocab,
                });
            }
            let (e, p) = (self.params.wte.row(tok), self.params.wpe.row(i));
            for j in 0..d {
                out[i * d + j] = e[j] + p[j];
            }
        }
        Tensor::new(vec![tokens.len(), d], out)
    }

    /// Attention sublayer output for a full sequence `x [t × d]`.
    pub(crate) fn attention_out(&self, k: usize, x: &Tensor<S>) -> Tensor<S> {
        let l = &self.params.layers[k];
        let h = dyt(&l.norm1, x);
        let q = linear(&h, &l.w_q, Some(&l.b_q));
        let kk = linear(&h, &l.w_k, Some(&l.b_k));
        let v = linear(&h, &l.w_v, Some(&l.b_v));
        let (t, d) = (x.shape()[0], x.last_dim());
        let mut o = vec![S::zero(); t * d];
        let mut probs = vec![S::zero(); self.config.n_heads * t * t];
        kernels::causal_attention(q.data(), kk.data(), v.data(), t, d, self.config.n_heads, &mut o, &mut probs);
        let o = Tensor::new(vec![t, d], o).expect("attention shape");
        linear(&o, &l.w_o, Some(&l.b_o))
    }

    /// MLP of block `k` applied row-wise to `u [r × d]`.
    pub fn mlp(&self, k: usize, u: &Tensor<S>) -> Tensor<S> {
        let l = &self.params.layers[k];
        let mut z = linear(u, &l.w1, Some(&l.b1));
        z.data_mut().iter_mut().for_each(|x| *x = kernels::gelu(*x));
        linear(&z, &l.w2, Some(&l.b2))
    }

    /// Runs a segment on its upstream activation. Position-wise segments
    /// accept any number of rows; a transformer block needs one sequence.
    pub fn segment(&self, seg: Segment, input: &Tensor<S>) -> Result<Tensor<S>> {
        let k = seg.layer();
        self.config.check_site(seg.up())?;
        if input.last_dim() != self.config.d_model {
            return Err(Error::shape("segment", input.shape(), &[self.config.d_model]));
        }
        Ok(match seg {
            Segment::FfLayer(_) => self.mlp(k, input),
            Segment::FfBlock(_) => {
                let u = dyt(&self.params.layers[k].norm2, input);
                add(input, &self.mlp(k, &u))
            }
            Segment::TransformerBlock(_) => {
                let mid = add(input, &self.attention_out(k, input));
                let u = dyt(&self.params.layers[k].norm2, &mid);
                add(&mid, &self.mlp(k, &u))
            }
        })
    }

    /// Final DyT and unembedding.
    pub fn unembed(&self, x: &Tensor<S>) -> Tensor<S> {
        let h = dyt(&self.params.norm_f, x);
        h.matmul(&self.params.w_u).expect("unembed shape")
    }

    fn run(
        &self,
        start: Site,
        value: Tensor<S>,
        skip_first_hook: bool,
        trace_in: Option<&Trace<S>>,
        stop: Option<Site>,
        hook: Hook<'_, S>,
    ) -> Result<Outcome<S>> {
        let n = self.config.n_layers;
        self.config.check_site(start)?;
        if let Some(s) = stop {
            self.config.check_site(s)?;
        }
        let mut trace = trace_in.cloned().unwrap_or(Trace { mids: vec![None; n] });
        let (mut k, mut stage) = (start.layer(), start.stage());
        let mut x = value;
        let mut skip = skip_first_hook;
        loop {
            let site = match stage {
                0 => Site::ResidPre(k),
                1 => Site::FfBlockIn(k),
                2 => Site::FfLayerIn(k),
                3 => Site::FfLayerOut(k),
                4 => Site::FfBlockOut(k),
                _ => Site::ResidPost(k),
            };
            if !skip {
                hook(site, &mut x)?;
                if stage == 1 {
                    trace.mids[k] = Some(x.clone());
                }
                if stop == Some(site) {
                    return Ok(Outcome::Stopped(x, trace));
                }
            }
            skip = false;
            let l = &self.params.layers[k];
            match stage {
                0 => x = add(&x, &self.attention_out(k, &x)),
                1 => x = dyt(&l.norm2, &x),
                2 => x = self.mlp(k, &x),
                3 => {
                    let mid = trace
                        .mid(k)
                        .ok_or_else(|| Error::invalid(format!("resuming at {site} needs the block-{k} residual")))?;
                    x = add(mid, &x);
                }
                4 => {}
                _ => {
                    if k + 1 == n {
                        return Ok(Outcome::Logits(self.unembed(&x)));
                    }
                    k += 1;
                    stage = 0;
                    continue;
                }
            }
            stage += 1;
        }
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<S>> {
        self.forward_hooked(tokens, &mut |_, _| Ok(()))
    }

    /// Full forward pass; `hook` may read or overwrite each site's value.
    pub fn forward_hooked(&self, tokens: &[u32], hook: Hook<'_, S>) -> Result<Tensor<S>> {
        let x = self.embed(tokens)?;
        match self.run(Site::ResidPre(0), x, false, None, None, hook)? {
            Outcome::Logits(l) => Ok(l),
            Outcome::Stopped(..) => unreachable!("no stop site"),
        }
    }

    /// Forward up to and including `site`, returning its value and a trace
    /// for [`LmWeights::resume`].
    pub fn run_to(&self, tokens: &[u32], site: Site) -> Result<(Tensor<S>, Trace<S>)> {
        self.run_to_hooked(tokens, site, &mut |_, _| Ok(()))
    }

    pub fn run_to_hooked(&self, tokens: &[u32], site: Site, hook: Hook<'_, S>) -> Result<(Tensor<S>, Trace<S>)> {
        let x = self.embed(tokens)?;
        match self.run(Site::ResidPre(0), x, false, None, Some(site), hook)? {
            Outcome::Stopped(v, t) => Ok((v, t)),
            Outcome::Logits(_) => unreachable!("stop site is inside the model"),
        }
    }

    /// Continues from `value` placed at `site` to logits.
    pub fn resume(&self, site: Site, value: Tensor<S>, trace: &Trace<S>) -> Result<Tensor<S>> {
        if value.last_dim() != self.config.d_model {
            return Err(Error::shape("resume", value.shape(), &[self.config.d_model]));
        }
        match self.run(site, value, true, Some(trace), None, &mut |_, _| Ok(()))? {
            Outcome::Logits(l) => Ok(l),
            Outcome::Stopped(..) => unreachable!("no stop site"),
        }
    }
}
