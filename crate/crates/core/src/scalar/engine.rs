//! Subcircuit forward passes: every retained downstream latent `ℓ` is
//! recomputed from the upstream latents connected to it.
//!
//! The batched engine notes that the masked input at position `q` for
//! latent `ℓ` is fixed by which of the (at most K) active upstream latents
//! at `q` are connected to `ℓ`. Equal masks give equal rows, and for a
//! transformer block equal mask prefixes give equal outputs, so each
//! distinct (prefix, position) is evaluated once.

use std::collections::HashMap;

use crate::attribution::{forward_jvp, AttnContext, LatentMap, Prepared, Readout};
use crate::error::{Error, Result};
use crate::lm::Segment;
use crate::sae::Code;
use crate::tensor::{kernels, Scalar, Tensor};

/// Edge ranks, so that the top `n` edges are those with rank `< n`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankIndex {
    pub width_down: usize,
    pub width_up: usize,
    pub rank: Vec<u32>,
    /// Smallest rank in each downstream row.
    pub row_min: Vec<u32>,
}

impl RankIndex {
    pub fn new(width_down: usize, width_up: usize, rank: Vec<u32>) -> Result<Self> {
        if rank.len() != width_down * width_up {
            return Err(Error::shape("rank matrix", &[rank.len()], &[width_down * width_up]));
        }
        let row_min = if width_up == 0 {
            vec![u32::MAX; width_down]
        } else {
            rank.chunks(width_up).map(|r| r.iter().copied().min().unwrap_or(u32::MAX)).collect()
        };
        Ok(Self {
            width_down,
            width_up,
            rank,
            row_min,
        })
    }

    pub fn from_ranking(r: &crate::attribution::EdgeRanking) -> Result<Self> {
        Self::new(r.width_down, r.width_up, r.rank_matrix())
    }

    /// An explicit edge set: listed `(down, up)` pairs get rank 0, the rest
    /// are never retained. Use with `n = 1`.
    pub fn from_edges(width_down: usize, width_up: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut rank = vec![u32::MAX; width_down * width_up];
        for &(i, j) in edges {
            if i >= width_down || j >= width_up {
                return Err(Error::OutOfRange {
                    what: "edge",
                    index: i.max(j),
                    limit: width_down.min(width_up),
                });
            }
            rank[i * width_up + j] = 0;
        }
        Self::new(width_down, width_up, rank)
    }

    pub fn total(&self) -> usize {
        self.rank.len()
    }

    #[inline]
    pub(crate) fn retained(&self, down: usize, up: usize, n: u64) -> bool {
        (self.rank[down * self.width_up + up] as u64) < n
    }

    #[inline]
    pub(crate) fn in_circuit(&self, down: usize, n: u64) -> bool {
        (self.row_min[down] as u64) < n
    }

    /// Bit `s` set when the `s`-th active upstream latent of `code` is
    /// connected to `down`.
    pub(crate) fn mask(&self, down: usize, code: &Code<impl Scalar>, n: u64) -> u64 {
        let mut m = 0u64;
        for (s, &j) in code.idx.iter().enumerate() {
            if self.retained(down, j, n) {
                m |= 1 << s;
            }
        }
        m
    }
}

fn check<S: Scalar>(map: &LatentMap<'_, S>, prep: &Prepared<S>, idx: &RankIndex) -> Result<()> {
    if idx.width_down != map.width_down() || idx.width_up != map.width_up() {
        return Err(Error::shape(
            "rank matrix",
            &[idx.width_down, idx.width_up],
            &[map.width_down(), map.width_up()],
        ));
    }
    if prep.codes.iter().any(|c| c.len() > 64) {
        return Err(Error::invalid("subcircuit masks support at most 64 active upstream latents"));
    }
    Ok(())
}

fn masked<S: Scalar>(code: &Code<S>, mask: u64) -> Code<S> {
    let mut out = Code { idx: Vec::new(), val: Vec::new() };
    for (s, (&j, &v)) in code.idx.iter().zip(&code.val).enumerate() {
        if mask >> s & 1 == 1 {
            out.idx.push(j);
            out.val.push(v);
        }
    }
    out
}

/// Downstream latents which may be non-zero at each position.
fn targets<S: Scalar>(map: &LatentMap<'_, S>, prep: &Prepared<S>, idx: &RankIndex, n: u64) -> Vec<Vec<usize>> {
    match map.readout {
        Readout::GatedPreTopk => prep
            .down_codes
            .iter()
            .map(|c| c.idx.iter().copied().filter(|&l| idx.in_circuit(l, n)).collect())
            .collect(),
        Readout::Topk => {
            let all: Vec<usize> = (0..idx.width_down).filter(|&l| idx.in_circuit(l, n)).collect();
            vec![all; prep.len()]
        }
    }
}

/// Value of latent `l` read from segment output `y`, given the full-code
/// of `y` when the readout needs it.
fn value<S: Scalar>(map: &LatentMap<'_, S>, y: &[S], l: usize, full: Option<&Code<S>>) -> S {
    match full {
        Some(code) => code.idx.binary_search(&l).map_or(S::zero(), |k| code.val[k]),
        None => map.read(y, &[l]).val.first().copied().unwrap_or(S::zero()),
    }
}

/// The literal per-latent procedure: for each retained downstream latent,
/// mask the upstream latents at every position, decode, run the segment
/// on the whole prompt, and keep that latent. Latents that cannot be
/// non-zero anywhere under the readout are skipped.
pub fn subcircuit_latents_naive<S: Scalar>(map: &LatentMap<'_, S>, prep: &Prepared<S>, idx: &RankIndex, n: u64) -> Result<Vec<Code<S>>> {
    check(map, prep, idx)?;
    let t = prep.len();
    let d = map.model.config.d_model;
    let want = targets(map, prep, idx, n);
    let mut out: Vec<Code<S>> = vec![Code { idx: Vec::new(), val: Vec::new() }; t];
    for l in 0..idx.width_down {
        if !want.iter().any(|w| w.contains(&l)) {
            continue;
        }
        let mut x = Tensor::zeros([t, d]);
        for q in 0..t {
            let c = masked(&prep.codes[q], idx.mask(l, &prep.codes[q], n));
            map.up.decode_sparse(&c, x.row_mut(q));
        }
        let y = map.model.segment(map.seg, &x)?;
        for p in 0..t {
            if !want[p].contains(&l) {
                continue;
            }
            let full = (map.readout == Readout::Topk).then(|| map.down.encode_row(y.row(p)));
            let v = value(map, y.row(p), l, full.as_ref());
            if v != S::zero() {
                out[p].idx.push(l);
                out[p].val.push(v);
            }
        }
    }
    Ok(out)
}

/// Same result as [`subcircuit_latents_naive`], bit for bit, evaluating
/// each distinct masked input once.
pub fn subcircuit_latents<S: Scalar>(map: &LatentMap<'_, S>, prep: &Prepared<S>, idx: &RankIndex, n: u64) -> Result<Vec<Code<S>>> {
    check(map, prep, idx)?;
    let t = prep.len();
    let want = targets(map, prep, idx, n);
    let chained = !map.seg.is_positionwise();

    // Node = (parent, position, mask); for positionwise segments the parent
    // is always the root.
    const ROOT: u32 = u32::MAX;
    let mut nodes: Vec<(u32, usize, u64)> = Vec::new();
    let mut intern: HashMap<(u32, usize, u64), u32> = HashMap::new();
    let mut node_of = |parent: u32, q: usize, mask: u64, nodes: &mut Vec<(u32, usize, u64)>| -> u32 {
        *intern.entry((parent, q, mask)).or_insert_with(|| {
            nodes.push((parent, q, mask));
            (nodes.len() - 1) as u32
        })
    };

    // Which latents each needed node must report.
    let mut jobs: Vec<(u32, usize)> = Vec::new();
    if chained {
        let mut positions: Vec<Vec<usize>> = vec![Vec::new(); idx.width_down];
        for (p, w) in want.iter().enumerate() {
            for &l in w {
                positions[l].push(p);
            }
        }
        for (l, ps) in positions.iter().enumerate() {
            let Some(&last) = ps.last() else { continue };
            let mut parent = ROOT;
            let mut cursor = 0;
            for q in 0..=last {
                parent = node_of(parent, q, idx.mask(l, &prep.codes[q], n), &mut nodes);
                if ps[cursor] == q {
                    jobs.push((parent, l));
                    cursor += 1;
                }
            }
        }
    } else {
        for (p, w) in want.iter().enumerate() {
            for &l in w {
                let id = node_of(ROOT, p, idx.mask(l, &prep.codes[p], n), &mut nodes);
                jobs.push((id, l));
            }
        }
    }

    let d = map.model.config.d_model;
    let decode = |q: usize, mask: u64| {
        let mut x = vec![S::zero(); d];
        map.up.decode_sparse(&masked(&prep.codes[q], mask), &mut x);
        x
    };
    // Keys and values per node, for transformer-block contexts.
    let mut kv: Vec<Option<(Vec<S>, Vec<S>)>> = vec![None; if chained { nodes.len() } else { 0 }];
    let mut outputs: HashMap<u32, (Vec<S>, Option<Code<S>>)> = HashMap::new();
    jobs.sort_unstable();
    let mut result: Vec<Vec<(usize, S)>> = vec![Vec::new(); t];
    for &(id, l) in &jobs {
        if !outputs.contains_key(&id) {
            let (_, p, mask) = nodes[id as usize];
            let x = decode(p, mask);
            let ctx = if let Segment::TransformerBlock(k) = map.seg {
                let mut chain = Vec::with_capacity(p);
                let mut cur = nodes[id as usize].0;
                while cur != ROOT {
                    chain.push(cur);
                    cur = nodes[cur as usize].0;
                }
                chain.reverse();
                let mut keys = Vec::with_capacity(p * d);
                let mut values = Vec::with_capacity(p * d);
                for &c in &chain {
                    if kv[c as usize].is_none() {
                        let (_, q, m) = nodes[c as usize];
                        kv[c as usize] = Some(key_value(map, k, &decode(q, m)));
                    }
                    let (kr, vr) = kv[c as usize].as_ref().expect("filled above");
                    keys.extend_from_slice(kr);
                    values.extend_from_slice(vr);
                }
                Some(AttnContext { keys, values, len: p })
            } else {
                None
            };
            let (y, _) = forward_jvp(map.model, map.seg, ctx.as_ref(), &x, &[])?;
            let full = (map.readout == Readout::Topk).then(|| map.down.encode_row(&y));
            outputs.insert(id, (y, full));
        }
        let (y, full) = &outputs[&id];
        let v = value(map, y, l, full.as_ref());
        if v != S::zero() {
            result[nodes[id as usize].1].push((l, v));
        }
    }
    Ok(result
        .into_iter()
        .map(|mut r| {
            r.sort_unstable_by_key(|&(l, _)| l);
            Code {
                idx: r.iter().map(|&(l, _)| l).collect(),
                val: r.iter().map(|&(_, v)| v).collect(),
            }
        })
        .collect())
}

fn key_value<S: Scalar>(map: &LatentMap<'_, S>, k: usize, x: &[S]) -> (Vec<S>, Vec<S>) {
    let l = &map.model.params.layers[k];
    let d = map.model.config.d_model;
    let mut h = vec![S::zero(); d];
    kernels::dyt_row(x, l.norm1.alpha.data(), l.norm1.gamma.data(), l.norm1.beta.data(), &mut h);
    let mut kr = vec![S::zero(); d];
    let mut vr = vec![S::zero(); d];
    kernels::linear_row(l.w_k.data(), Some(l.b_k.data()), &h, &mut kr);
    kernels::linear_row(l.w_v.data(), Some(l.b_v.data()), &h, &mut vr);
    (kr, vr)
}

/// Decodes downstream codes and runs the rest of the model.
pub fn logits_from_codes<S: Scalar>(map: &LatentMap<'_, S>, prep: &Prepared<S>, codes: &[Code<S>]) -> Result<Tensor<S>> {
    let d = map.model.config.d_model;
    let mut x = Tensor::zeros([codes.len(), d]);
    for (p, c) in codes.iter().enumerate() {
        map.down.decode_sparse(c, x.row_mut(p));
    }
    map.model.resume(map.seg.down(), x, &prep.trace)
}

/// Logits of the subcircuit keeping the top `n` edges.
pub fn subcircuit_forward<S: Scalar>(map: &LatentMap<'_, S>, prep: &Prepared<S>, idx: &RankIndex, n: u64) -> Result<Tensor<S>> {
    let codes = subcircuit_latents(map, prep, idx, n)?;
    logits_from_codes(map, prep, &codes)
}

/// Logits with both sites replaced by their reconstructions.
pub fn full_circuit_logits<S: Scalar>(map: &LatentMap<'_, S>, prep: &Prepared<S>) -> Result<Tensor<S>> {
    logits_from_codes(map, prep, &prep.down_codes)
}
