//! Integrated-gradient scores for every upstream-latent to
//! downstream-latent connection across a model segment.

mod row;

pub(crate) use row::{forward_jvp, AttnContext};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Corpus, LmWeights, Segment, Split, Trace};
use crate::sae::{same_value, Code, SaeRef};
use crate::tensor::{kernels, RngState, Scalar, Tensor};

/// How a downstream latent is read off the segment output when
/// differentiating or ablating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// `ReLU(pre_ℓ)`, kept only where `ℓ` is active in the full circuit at
    /// that position.
    #[default]
    GatedPreTopk,
    /// The latent after the downstream TopK is applied to the output.
    Topk,
}

/// Midpoints `(t + ½)/T` of a `T`-term Riemann sum on `[0, 1]`.
pub fn midpoints(terms: usize) -> Result<Vec<f64>> {
    if terms == 0 {
        return Err(Error::invalid("integrated gradients needs at least one term"));
    }
    Ok((0..terms).map(|t| (t as f64 + 0.5) / terms as f64).collect())
}

/// Per-coordinate integrated gradients of a scalar function along the
/// straight path from `base` to `v`: `a_i = (v_i − b_i)·mean_t ∂_i f(b + z_t(v − b))`.
pub fn integrated_gradients(v: &[f64], base: &[f64], terms: usize, mut grad: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Vec<f64>> {
    if v.len() != base.len() {
        return Err(Error::shape("integrated_gradients", &[v.len()], &[base.len()]));
    }
    let zs = midpoints(terms)?;
    let mut acc = vec![0.0; v.len()];
    let mut point = vec![0.0; v.len()];
    for z in zs {
        for ((p, &vi), &bi) in point.iter_mut().zip(v).zip(base) {
            *p = bi + z * (vi - bi);
        }
        let g = grad(&point);
        if g.len() != v.len() {
            return Err(Error::shape("integrated_gradients gradient", &[g.len()], &[v.len()]));
        }
        acc.iter_mut().zip(&g).for_each(|(a, &gi)| *a += gi);
    }
    Ok(acc
        .iter()
        .zip(v.iter().zip(base))
        .map(|(&a, (&vi, &bi))| (vi - bi) * a / terms as f64)
        .collect())
}

/// One prompt pushed through the full circuit: upstream codes and their
/// reconstruction, the segment applied to that reconstruction, and its
/// downstream codes.
#[derive(Clone, Debug)]
pub struct Prepared<S> {
    pub codes: Vec<Code<S>>,
    pub recon: Tensor<S>,
    pub down_codes: Vec<Code<S>>,
    /// Trace of the true model run, for resuming after the segment.
    pub trace: Trace<S>,
}

impl<S> Prepared<S> {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// The map from upstream latents to downstream latents through a segment:
/// decode, run the segment, re-encode.
#[derive(Clone, Copy, Debug)]
pub struct LatentMap<'a, S> {
    pub model: &'a LmWeights<S>,
    pub seg: Segment,
    pub up: SaeRef<'a, S>,
    pub down: SaeRef<'a, S>,
    pub readout: Readout,
}

impl<'a, S: Scalar> LatentMap<'a, S> {
    pub fn new(model: &'a LmWeights<S>, seg: Segment, up: SaeRef<'a, S>, down: SaeRef<'a, S>, readout: Readout) -> Result<Self> {
        model.config.check_site(seg.up())?;
        let d = model.config.d_model;
        if up.d_model() != d || down.d_model() != d {
            return Err(Error::shape("latent map", &[up.d_model(), down.d_model()], &[d]));
        }
        for (sae, site) in [(&up, seg.up()), (&down, seg.down())] {
            if !same_value(sae.site, site) {
                return Err(Error::invalid(format!("SAE for {} cannot read {site}", sae.site)));
            }
        }
        Ok(Self { model, seg, up, down, readout })
    }

    pub fn width_up(&self) -> usize {
        self.up.width
    }

    pub fn width_down(&self) -> usize {
        self.down.width
    }

    /// Runs the model on `tokens` to the upstream site, encodes every
    /// position, and runs the segment on the reconstruction.
    pub fn prepare(&self, tokens: &[u32]) -> Result<Prepared<S>> {
        let (h, trace) = self.model.run_to(tokens, self.seg.up())?;
        let codes = self.up.encode_sparse(&h)?;
        let d = self.model.config.d_model;
        let mut recon = Tensor::zeros([codes.len(), d]);
        for (r, c) in codes.iter().enumerate() {
            self.up.decode_sparse(c, recon.row_mut(r));
        }
        let out = self.model.segment(self.seg, &recon)?;
        let down_codes = self.down.encode_sparse(&out)?;
        Ok(Prepared {
            codes,
            recon,
            down_codes,
            trace,
        })
    }

    /// Downstream readout of one segment output row. `endpoint` is the
    /// full-circuit active set at that position.
    pub fn read(&self, y: &[S], endpoint: &[usize]) -> Code<S> {
        match self.readout {
            Readout::Topk => self.down.encode_row(y),
            Readout::GatedPreTopk => {
                let c: Vec<S> = y.iter().zip(self.down.b_dec).map(|(&a, &b)| a - b).collect();
                let mut code = Code { idx: Vec::new(), val: Vec::new() };
                for &i in endpoint {
                    let v = kernels::dot(self.down.w_enc.row(i), &c) + self.down.b_enc[i];
                    if v > S::zero() {
                        code.idx.push(i);
                        code.val.push(v);
                    }
                }
                code
            }
        }
    }

    /// `f(s)` at position `p` of a prepared prompt, with `s` the upstream
    /// latent vector at `p` (other positions keep their reconstruction).
    pub fn eval(&self, prep: &Prepared<S>, p: usize, s: &Code<S>) -> Result<Code<S>> {
        let ctx = self.context(prep, p);
        let mut x = vec![S::zero(); self.model.config.d_model];
        self.up.decode_sparse(s, &mut x);
        let (y, _) = forward_jvp(self.model, self.seg, ctx.as_ref(), &x, &[])?;
        Ok(self.read(&y, &prep.down_codes[p].idx))
    }

    fn context(&self, prep: &Prepared<S>, p: usize) -> Option<AttnContext<S>> {
        match self.seg {
            Segment::TransformerBlock(k) => Some(AttnContext::build(self.model, k, &prep.recon, p)),
            _ => None,
        }
    }

    /// Adds the squared IG attributions of position `p` into `sumsq`
    /// (`[width_down × width_up]`, row-major).
    fn accumulate(&self, prep: &Prepared<S>, p: usize, zs: &[f64], sumsq: &mut [f64]) -> Result<()> {
        let code = &prep.codes[p];
        if code.is_empty() {
            return Ok(());
        }
        let ctx = self.context(prep, p);
        let dirs: Vec<Vec<S>> = code.idx.iter().map(|&j| self.up.dec_col(j)).collect();
        let endpoint = &prep.down_codes[p].idx;
        let d = self.model.config.d_model;
        let nk = code.len();
        // (downstream latent, summed path gradient per upstream slot)
        let mut grads: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut x = vec![S::zero(); d];
        for &z in zs {
            let scaled = Code {
                idx: code.idx.clone(),
                val: code.val.iter().map(|&v| S::of(z * v.f64())).collect(),
            };
            self.up.decode_sparse(&scaled, &mut x);
            let (y, dys) = forward_jvp(self.model, self.seg, ctx.as_ref(), &x, &dirs)?;
            for i in self.read(&y, endpoint).idx {
                let row = self.down.w_enc.row(i);
                let slot = match grads.iter().position(|(g, _)| *g == i) {
                    Some(s) => s,
                    None => {
                        grads.push((i, vec![0.0; nk]));
                        grads.len() - 1
                    }
                };
                for (acc, dy) in grads[slot].1.iter_mut().zip(&dys) {
                    *acc += kernels::dot(row, dy).f64();
                }
            }
        }
        let t = zs.len() as f64;
        let wu = self.up.width;
        for (i, g) in grads {
            for ((&j, &v), gs) in code.idx.iter().zip(&code.val).zip(g) {
                let a = v.f64() * gs / t;
                sumsq[i * wu + j] += a * a;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub samples: usize,
    pub terms: usize,
    /// Positions are drawn from the first `seq_len` of each training block.
    pub seq_len: usize,
    pub seed: u64,
    pub readout: Readout,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            samples: 576,
            terms: 5,
            seq_len: 128,
            seed: 0,
            readout: Readout::GatedPreTopk,
        }
    }
}

/// RMS attributions, `[width_down × width_up]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeScoreMatrix {
    pub scores: Tensor<f64>,
    pub samples: usize,
    pub terms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScoreMeta {
    pub segment: Segment,
    pub samples: usize,
    pub terms: usize,
    pub seed: u64,
    pub readout: Readout,
}

impl EdgeScoreMatrix {
    pub fn width_down(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn width_up(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn get(&self, down: usize, up: usize) -> f64 {
        self.scores.data()[down * self.width_up() + up]
    }
}

/// Seeded `(training block, position)` draws, without replacement.
pub fn draw_positions(corpus: &Corpus, samples: usize, seq_len: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let blocks = corpus.blocks(Split::Train);
    let len = seq_len.min(corpus.block_len - 1);
    let available = blocks.len() * len;
    if samples == 0 {
        return Err(Error::Empty("attribution samples"));
    }
    if samples > available {
        return Err(Error::OutOfRange {
            what: "attribution samples",
            index: samples,
            limit: available,
        });
    }
    let mut pick = RngState::new(seed).permutation(available);
    pick.truncate(samples);
    Ok(pick.into_iter().map(|r| (blocks[r / len], r % len)).collect())
}

/// IG edge scores over explicit `(block, position)` samples.
pub fn edge_scores_at<S: Scalar>(map: &LatentMap<'_, S>, corpus: &Corpus, positions: &[(usize, usize)], terms: usize) -> Result<EdgeScoreMatrix> {
    if positions.is_empty() {
        return Err(Error::Empty("attribution samples"));
    }
    let zs = midpoints(terms)?;
    let (wd, wu) = (map.width_down(), map.width_up());
    let mut sumsq = vec![0.0; wd * wu];
    for &(b, p) in positions {
        let tokens = &corpus.block(b)[..=p];
        let prep = map.prepare(tokens)?;
        map.accumulate(&prep, p, &zs, &mut sumsq)?;
    }
    let n = positions.len() as f64;
    let scores = sumsq.into_iter().map(|s| (s / n).sqrt()).collect();
    let scores = Tensor::new(vec![wd, wu], scores)?;
    scores.ensure_finite("edge scores")?;
    Ok(EdgeScoreMatrix {
        scores,
        samples: positions.len(),
        terms,
    })
}

/// IG edge scores over `config.samples` seeded training positions.
pub fn edge_scores<S: Scalar>(map: &LatentMap<'_, S>, corpus: &Corpus, config: &AttributionConfig) -> Result<EdgeScoreMatrix> {
    if map.readout != config.readout {
        return Err(Error::invalid("latent map readout differs from the attribution config"));
    }
    let positions = draw_positions(corpus, config.samples, config.seq_len, config.seed)?;
    edge_scores_at(map, corpus, &positions, config.terms)
}

/// Edges ordered by descending score, ties by `(down, up)` ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRanking {
    pub width_down: usize,
    pub width_up: usize,
    /// Flat indices `down·width_up + up`, strongest first.
    pub order: Vec<u32>,
}

impl EdgeRanking {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `(down, up)` of the edge at rank `r`.
    pub fn edge(&self, r: usize) -> (usize, usize) {
        let f = self.order[r] as usize;
        (f / self.width_up, f % self.width_up)
    }

    /// `rank[down·width_up + up]`: position of each edge in the order.
    pub fn rank_matrix(&self) -> Vec<u32> {
        let mut rank = vec![0u32; self.order.len()];
        for (r, &f) in self.order.iter().enumerate() {
            rank[f as usize] = r as u32;
        }
        rank
    }
}

pub fn rank_edges(m: &EdgeScoreMatrix) -> Result<EdgeRanking> {
    m.scores.ensure_finite("edge scores")?;
    let n = m.scores.numel();
    if n > u32::MAX as usize {
        return Err(Error::OutOfRange {
            what: "edge count",
            index: n,
            limit: u32::MAX as usize,
        });
    }
    let s = m.scores.data();
    // Zero-score edges keep their lexicographic order, so only the rest
    // needs sorting.
    let mut strong: Vec<u32> = (0..n as u32).filter(|&f| s[f as usize] != 0.0).collect();
    strong.sort_unstable_by(|&a, &b| s[b as usize].total_cmp(&s[a as usize]).then(a.cmp(&b)));
    let mut order = strong;
    order.extend((0..n as u32).filter(|&f| s[f as usize] == 0.0));
    Ok(EdgeRanking {
        width_down: m.width_down(),
        width_up: m.width_up(),
        order,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("rank correlation needs two equal-length series of length ≥ 2"));
    }
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("rank correlation of a constant series"));
    }
    Ok(sab / (saa * sbb).sqrt())
}
