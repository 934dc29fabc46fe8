//! TopK sparse autoencoders, the Staircase family that shares one growing
//! dictionary across depth, and the variant zoo built from the same parts.

mod eval;
mod train;

pub use eval::{chunk_usage, splice_eval, ChunkUsage, SpliceEval};
pub(crate) use train::tape_encode_decode;
pub use train::{recon_loss_and_grads, tape_recon_loss, train_family, ReconGrads, SaeHistory, SaeTrainConfig, SaeVars};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Site;
use crate::tensor::{kernels, RngState, Scalar, Tensor};

/// The SAE configurations compared in the variant study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Independent TopK SAEs, width `8·d_model` each.
    TopkX8,
    /// Independent TopK SAEs, width `40·d_model` each.
    TopkX40,
    /// One `40·d_model` dictionary shared by every site, with per-site biases.
    TopkX40Tied,
    /// Staircase: site `i` uses the first `n·i` features of a shared store.
    StaircaseX8,
    /// Staircase widths, but each site owns its matrices.
    StaircaseUntiedX8,
    /// Staircase where site `i` only trains its own chunk.
    StaircaseDetach,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::TopkX8,
        Variant::TopkX40,
        Variant::TopkX40Tied,
        Variant::StaircaseX8,
        Variant::StaircaseUntiedX8,
        Variant::StaircaseDetach,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TopkX8 => "topk-x8",
            Variant::TopkX40 => "topk-x40",
            Variant::TopkX40Tied => "topk-x40-tied",
            Variant::StaircaseX8 => "staircase-x8",
            Variant::StaircaseUntiedX8 => "staircase-untied-x8",
            Variant::StaircaseDetach => "staircase-detach",
        }
    }

    pub fn is_staircase(self) -> bool {
        matches!(
            self,
            Variant::StaircaseX8 | Variant::StaircaseUntiedX8 | Variant::StaircaseDetach
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown SAE variant `{s}`")))
    }
}

impl Serialize for Variant {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Staircase depth of a site. Residual-stream and FF-block sites are
/// numbered so that the pair around block `k` spans depths `k+1` and `k+2`.
/// A family's member indices are these depths shifted so that its
/// shallowest member has index 1.
pub fn staircase_index(site: Site) -> usize {
    match site {
        Site::ResidPre(k) | Site::FfBlockIn(k) | Site::FfLayerIn(k) => k + 1,
        Site::ResidPost(k) | Site::FfBlockOut(k) | Site::FfLayerOut(k) => k + 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    /// Active-latent budget.
    pub k: usize,
    /// Width multiplier for the x8 variants and the Staircase chunk.
    pub expansion: usize,
    /// Width multiplier for the x40 variants.
    pub wide_expansion: usize,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            k: 10,
            expansion: 8,
            wide_expansion: 40,
        }
    }
}

/// A dictionary: encoder `[N × d]` and decoder `[d × N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Store<S> {
    pub w_enc: Tensor<S>,
    pub w_dec: Tensor<S>,
}

impl<S: Scalar> Store<S> {
    /// Random unit-norm decoder columns with the encoder set to the
    /// decoder's transpose.
    fn init(width: usize, d: usize, rng: &mut RngState) -> Self {
        let mut w_enc = Tensor::<S>::randn([width, d], 1.0, rng);
        for row in w_enc.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x = S::of(x.f64() / norm));
        }
        let w_dec = w_enc.transpose().expect("rank 2");
        Self { w_enc, w_dec }
    }

    pub fn width(&self) -> usize {
        self.w_enc.shape()[0]
    }
}

/// Per-site parameters and the slice of a store the site uses.
#[derive(Clone, Debug, PartialEq)]
pub struct Member<S> {
    pub site: Site,
    pub store: usize,
    /// Staircase index (1-based); 1 for non-Staircase variants.
    pub index: usize,
    pub width: usize,
    /// Store features below this index receive no gradient from this member.
    pub grad_from: usize,
    pub b_enc: Tensor<S>,
    pub b_dec: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberMeta {
    pub site: Site,
    pub store: usize,
    pub index: usize,
    pub width: usize,
    pub grad_from: usize,
}

/// Everything needed besides the tensors to rebuild a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyMeta {
    pub variant: Variant,
    pub k: usize,
    pub d_model: usize,
    pub chunk: usize,
    pub store_widths: Vec<usize>,
    pub members: Vec<MemberMeta>,
}

/// A set of SAEs over several sites, possibly sharing dictionaries.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeFamily<S> {
    pub variant: Variant,
    pub k: usize,
    pub d_model: usize,
    /// Feature chunk size `n`; usage statistics are reported per chunk.
    pub chunk: usize,
    pub stores: Vec<Store<S>>,
    pub members: Vec<Member<S>>,
}

impl<S: Scalar> SaeFamily<S> {
    /// Builds a freshly initialized family for `sites`. Decoder biases start
    /// at zero; see [`SaeFamily::init_decoder_bias`].
    pub fn new(variant: Variant, sites: &[Site], d_model: usize, config: &SaeConfig, seed: u64) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::Empty("SAE sites"));
        }
        for (i, s) in sites.iter().enumerate() {
            if sites[..i].contains(s) {
                return Err(Error::invalid(format!("site {s} listed twice")));
            }
        }
        let n = config.expansion * d_model;
        let wide = config.wide_expansion * d_model;
        if config.k == 0 || config.k > n.min(wide) {
            return Err(Error::Config(format!("K = {} must lie in 1..={}", config.k, n.min(wide))));
        }
        let mut rng = RngState::new(seed);
        let depth: Vec<usize> = sites.iter().map(|&s| staircase_index(s)).collect();
        let base = depth.iter().copied().min().unwrap_or(1);
        let idx: Vec<usize> = depth.iter().map(|&i| i + 1 - base).collect();
        let max_i = idx.iter().copied().max().unwrap_or(1);
        // (store width or None for "one store per member", member width, grad_from)
        let (shared, chunk): (Option<usize>, usize) = match variant {
            Variant::TopkX8 | Variant::TopkX40 | Variant::StaircaseUntiedX8 => (None, n),
            Variant::TopkX40Tied => (Some(wide), wide),
            Variant::StaircaseX8 | Variant::StaircaseDetach => (Some(n * max_i), n),
        };
        let mut stores = Vec::new();
        if let Some(w) = shared {
            stores.push(Store::init(w, d_model, &mut rng));
        }
        let mut members = Vec::with_capacity(sites.len());
        for (&site, &i) in sites.iter().zip(&idx) {
            let (width, grad_from, index) = match variant {
                Variant::TopkX8 => (n, 0, 1),
                Variant::TopkX40 | Variant::TopkX40Tied => (wide, 0, 1),
                Variant::StaircaseX8 | Variant::StaircaseUntiedX8 => (n * i, 0, i),
                Variant::StaircaseDetach => (n * i, n * (i - 1), i),
            };
            let store = if shared.is_some() {
                0
            } else {
                stores.push(Store::init(width, d_model, &mut rng));
                stores.len() - 1
            };
            members.push(Member {
                site,
                store,
                index,
                width,
                grad_from,
                b_enc: Tensor::zeros([width]),
                b_dec: Tensor::zeros([d_model]),
            });
        }
        Ok(Self {
            variant,
            k: config.k,
            d_model,
            chunk,
            stores,
            members,
        })
    }

    /// Sets each member's decoder bias to the mean of its data.
    pub fn init_decoder_bias(&mut self, data: &[&Tensor<S>]) -> Result<()> {
        self.check_data(data)?;
        for (m, x) in self.members.iter_mut().zip(data) {
            let rows = x.shape()[0].max(1);
            let mut mean = vec![0.0f64; self.d_model];
            for r in x.rows() {
                for (acc, v) in mean.iter_mut().zip(r) {
                    *acc += v.f64();
                }
            }
            m.b_dec = Tensor::from_fn([self.d_model], |j| S::of(mean[j] / rows as f64));
        }
        Ok(())
    }

    pub(crate) fn check_data(&self, data: &[&Tensor<S>]) -> Result<()> {
        if data.len() != self.members.len() {
            return Err(Error::shape("SAE datasets", &[self.members.len()], &[data.len()]));
        }
        for x in data {
            let (r, c) = x.dims2()?;
            if c != self.d_model {
                return Err(Error::shape("SAE dataset width", &[self.d_model], &[c]));
            }
            if r == 0 {
                return Err(Error::Empty("SAE dataset"));
            }
        }
        Ok(())
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    /// Read-only view of member `m` (0-based position in the member list).
    pub fn sae(&self, m: usize) -> Result<SaeRef<'_, S>> {
        let mem = self.members.get(m).ok_or(Error::OutOfRange {
            what: "SAE member",
            index: m,
            limit: self.members.len(),
        })?;
        let st = &self.stores[mem.store];
        Ok(SaeRef {
            site: mem.site,
            k: self.k,
            width: mem.width,
            w_enc: &st.w_enc,
            w_dec: &st.w_dec,
            b_enc: mem.b_enc.data(),
            b_dec: mem.b_dec.data(),
        })
    }

    /// The member placed at `site`, accepting aliases of the same residual
    /// value (`FfBlockOut(k)`, `ResidPost(k)` and `ResidPre(k+1)`).
    pub fn sae_at(&self, site: Site) -> Result<SaeRef<'_, S>> {
        let pos = self
            .members
            .iter()
            .position(|m| m.site == site)
            .or_else(|| self.members.iter().position(|m| same_value(m.site, site)))
            .ok_or_else(|| Error::UnknownSite(site.to_string()))?;
        self.sae(pos)
    }

    /// The Staircase member with 1-based index `i`.
    pub fn staircase_member(&self, i: usize) -> Result<SaeRef<'_, S>> {
        let pos = self.staircase_position(i)?;
        self.sae(pos)
    }

    /// Mutable view of Staircase member `i`: writes to its weights land in
    /// the shared store.
    pub fn staircase_member_mut(&mut self, i: usize) -> Result<SaeMut<'_, S>> {
        let pos = self.staircase_position(i)?;
        self.member_mut(pos)
    }

    fn staircase_position(&self, i: usize) -> Result<usize> {
        self.members
            .iter()
            .position(|m| m.index == i)
            .ok_or(Error::OutOfRange {
                what: "staircase member",
                index: i,
                limit: self.members.iter().map(|m| m.index).max().unwrap_or(0),
            })
    }

    pub fn member_mut(&mut self, m: usize) -> Result<SaeMut<'_, S>> {
        let limit = self.members.len();
        let mem = self.members.get_mut(m).ok_or(Error::OutOfRange {
            what: "SAE member",
            index: m,
            limit,
        })?;
        let st = &mut self.stores[mem.store];
        Ok(SaeMut {
            width: mem.width,
            w_enc: &mut st.w_enc,
            w_dec: &mut st.w_dec,
            b_enc: &mut mem.b_enc,
            b_dec: &mut mem.b_dec,
        })
    }

    pub fn parameter_count(&self) -> usize {
        let stores: usize = self.stores.iter().map(|s| s.w_enc.numel() + s.w_dec.numel()).sum();
        let biases: usize = self.members.iter().map(|m| m.b_enc.numel() + m.b_dec.numel()).sum();
        stores + biases
    }

    pub fn meta(&self) -> FamilyMeta {
        FamilyMeta {
            variant: self.variant,
            k: self.k,
            d_model: self.d_model,
            chunk: self.chunk,
            store_widths: self.stores.iter().map(Store::width).collect(),
            members: self
                .members
                .iter()
                .map(|m| MemberMeta {
                    site: m.site,
                    store: m.store,
                    index: m.index,
                    width: m.width,
                    grad_from: m.grad_from,
                })
                .collect(),
        }
    }

    /// Tensors in a fixed order for persistence.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, s) in self.stores.iter().enumerate() {
            out.push((format!("store.{i}.w_enc"), &s.w_enc));
            out.push((format!("store.{i}.w_dec"), &s.w_dec));
        }
        for (i, m) in self.members.iter().enumerate() {
            out.push((format!("member.{i}.b_enc"), &m.b_enc));
            out.push((format!("member.{i}.b_dec"), &m.b_dec));
        }
        out
    }

    /// Rebuilds a family from its metadata and named tensors.
    pub fn from_parts(meta: &FamilyMeta, tensors: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let mut map: std::collections::HashMap<String, Tensor<S>> = tensors.into_iter().collect();
        let d = meta.d_model;
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor<S>> {
            let t = map
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::shape("load SAE", shape, t.shape()));
            }
            Ok(t)
        };
        let mut stores = Vec::new();
        for (i, &w) in meta.store_widths.iter().enumerate() {
            stores.push(Store {
                w_enc: take(format!("store.{i}.w_enc"), &[w, d])?,
                w_dec: take(format!("store.{i}.w_dec"), &[d, w])?,
            });
        }
        let mut members = Vec::new();
        for (i, m) in meta.members.iter().enumerate() {
            let sw = *meta
                .store_widths
                .get(m.store)
                .ok_or_else(|| Error::Format(format!("member {i} names missing store {}", m.store)))?;
            if m.width > sw || m.grad_from > m.width || meta.k > m.width {
                return Err(Error::Format(format!("member {i} has inconsistent widths")));
            }
            members.push(Member {
                site: m.site,
                store: m.store,
                index: m.index,
                width: m.width,
                grad_from: m.grad_from,
                b_enc: take(format!("member.{i}.b_enc"), &[m.width])?,
                b_dec: take(format!("member.{i}.b_dec"), &[d])?,
            });
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            variant: meta.variant,
            k: meta.k,
            d_model: d,
            chunk: meta.chunk,
            stores,
            members,
        })
    }
}

/// Whether two sites always carry the same activation.
pub fn same_value(a: Site, b: Site) -> bool {
    fn canon(s: Site) -> Site {
        match s {
            Site::FfBlockOut(k) => Site::ResidPost(k),
            Site::ResidPre(k) if k > 0 => Site::ResidPost(k - 1),
            s => s,
        }
    }
    canon(a) == canon(b)
}

/// A sparse latent vector: active indices in ascending order and values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Code<S> {
    pub idx: Vec<usize>,
    pub val: Vec<S>,
}

impl<S: Scalar> Code<S> {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn to_dense(&self, width: usize) -> Vec<S> {
        let mut out = vec![S::zero(); width];
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            out[i] = v;
        }
        out
    }
}

/// One SAE seen through its member: the first `width` features of a store
/// plus the member's own biases.
#[derive(Clone, Copy, Debug)]
pub struct SaeRef<'a, S> {
    pub site: Site,
    pub k: usize,
    pub width: usize,
    pub w_enc: &'a Tensor<S>,
    pub w_dec: &'a Tensor<S>,
    pub b_enc: &'a [S],
    pub b_dec: &'a [S],
}

impl<'a, S: Scalar> SaeRef<'a, S> {
    pub fn d_model(&self) -> usize {
        self.b_dec.len()
    }

    /// Encoder row `j`.
    pub fn enc_row(&self, j: usize) -> &'a [S] {
        self.w_enc.row(j)
    }

    /// Decoder column `j`, copied out of the `[d × N]` store.
    pub fn dec_col(&self, j: usize) -> Vec<S> {
        let n = self.w_dec.shape()[1];
        (0..self.d_model()).map(|r| self.w_dec.data()[r * n + j]).collect()
    }

    /// `W_enc(h − b_dec) + b_enc` for one row.
    pub fn pre_row(&self, h: &[S], out: &mut [S]) {
        let c: Vec<S> = h.iter().zip(self.b_dec).map(|(&a, &b)| a - b).collect();
        for (j, o) in out.iter_mut().enumerate().take(self.width) {
            *o = kernels::dot(self.w_enc.row(j), &c) + self.b_enc[j];
        }
    }

    /// Pre-activations for every row of `h [r × d]`, giving `[r × width]`.
    pub fn pre_activations(&self, h: &Tensor<S>) -> Result<Tensor<S>> {
        let (r, d) = h.dims2()?;
        if d != self.d_model() {
            return Err(Error::shape("SAE encode", &[d], &[self.d_model()]));
        }
        let mut c = h.data().to_vec();
        for row in c.chunks_mut(d) {
            for (x, &b) in row.iter_mut().zip(self.b_dec) {
                *x -= b;
            }
        }
        let mut out = vec![S::zero(); r * self.width];
        kernels::matmul_nt(&c, &self.w_enc.data()[..self.width * d], &mut out, r, d, self.width);
        for row in out.chunks_mut(self.width) {
            for (x, &b) in row.iter_mut().zip(self.b_enc) {
                *x += b;
            }
        }
        Tensor::new(vec![r, self.width], out)
    }

    /// `TopK(ReLU(pre))` of one row as a sparse code.
    pub fn encode_row(&self, h: &[S]) -> Code<S> {
        let mut pre = vec![S::zero(); self.width];
        self.pre_row(h, &mut pre);
        code_from_pre(&mut pre, self.k)
    }

    /// Sparse codes for every row of `h`.
    pub fn encode_sparse(&self, h: &Tensor<S>) -> Result<Vec<Code<S>>> {
        let mut pre = self.pre_activations(h)?;
        Ok(pre
            .data_mut()
            .chunks_mut(self.width)
            .map(|row| code_from_pre(row, self.k))
            .collect())
    }

    /// Dense latents `[r × width]`.
    pub fn encode(&self, h: &Tensor<S>) -> Result<Tensor<S>> {
        let mut pre = self.pre_activations(h)?;
        for row in pre.data_mut().chunks_mut(self.width) {
            kernels::relu_topk_in_place(row, self.k);
        }
        Ok(pre)
    }

    /// `b_dec + Σ z_j W_dec[:, j]` over a sparse code, summing in ascending
    /// index order.
    pub fn decode_sparse(&self, code: &Code<S>, out: &mut [S]) {
        let n = self.w_dec.shape()[1];
        out.copy_from_slice(self.b_dec);
        let w = self.w_dec.data();
        for (&j, &v) in code.idx.iter().zip(&code.val) {
            for (r, o) in out.iter_mut().enumerate() {
                *o += v * w[r * n + j];
            }
        }
    }

    /// Dense decode of `z [r × width]`.
    pub fn decode(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        let (r, w) = z.dims2()?;
        if w != self.width {
            return Err(Error::shape("SAE decode", &[w], &[self.width]));
        }
        let d = self.d_model();
        let mut out = vec![S::zero(); r * d];
        for (zr, or) in z.rows().zip(out.chunks_mut(d)) {
            let code = Code {
                idx: (0..w).filter(|&j| zr[j] != S::zero()).collect(),
                val: zr.iter().copied().filter(|&v| v != S::zero()).collect(),
            };
            self.decode_sparse(&code, or);
        }
        Tensor::new(vec![r, d], out)
    }

    /// Encode then decode every row.
    pub fn reconstruct(&self, h: &Tensor<S>) -> Result<Tensor<S>> {
        let codes = self.encode_sparse(h)?;
        let d = self.d_model();
        let mut out = vec![S::zero(); codes.len() * d];
        for (c, o) in codes.iter().zip(out.chunks_mut(d)) {
            self.decode_sparse(c, o);
        }
        Tensor::new(vec![codes.len(), d], out)
    }

    /// Mean over rows of `‖h − h'‖²`.
    pub fn recon_loss(&self, h: &Tensor<S>) -> Result<f64> {
        let r = self.reconstruct(h)?;
        let n = h.shape()[0].max(1) as f64;
        Ok(h.data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| (a.f64() - b.f64()).powi(2))
            .sum::<f64>()
            / n)
    }
}

/// Applies ReLU and TopK to `pre` in place and collects the survivors.
pub(crate) fn code_from_pre<S: Scalar>(pre: &mut [S], k: usize) -> Code<S> {
    let idx = kernels::relu_topk_in_place(pre, k);
    let val = idx.iter().map(|&i| pre[i]).collect();
    Code { idx, val }
}

/// `TopK(ReLU(v))` over a dense vector.
pub fn topk_relu<S: Scalar>(v: &[S], k: usize) -> Result<Vec<S>> {
    if k > v.len() {
        return Err(Error::invalid(format!("K = {k} exceeds width {}", v.len())));
    }
    let mut out = v.to_vec();
    kernels::relu_topk_in_place(&mut out, k);
    Ok(out)
}

/// Mutable access to one member's weights and biases.
pub struct SaeMut<'a, S> {
    pub width: usize,
    pub w_enc: &'a mut Tensor<S>,
    pub w_dec: &'a mut Tensor<S>,
    pub b_enc: &'a mut Tensor<S>,
    pub b_dec: &'a mut Tensor<S>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sites5() -> Vec<Site> {
        vec![
            Site::ResidPre(0),
            Site::ResidPre(1),
            Site::ResidPre(2),
            Site::ResidPre(3),
            Site::ResidPost(3),
        ]
    }

    #[test]
    fn topk_relu_examples() {
        assert_eq!(topk_relu(&[3.0, -1.0, 2.0, 0.0], 2).unwrap(), vec![3.0, 0.0, 2.0, 0.0]);
        // ReLU can leave fewer than K survivors.
        assert_eq!(topk_relu(&[-1.0, -2.0], 1).unwrap(), vec![0.0, 0.0]);
        assert!(topk_relu(&[1.0], 2).is_err());
    }

    proptest! {
        #[test]
        fn topk_relu_matches_sort(v in proptest::collection::vec(-5.0f64..5.0, 16), k in 1usize..16) {
            let out = topk_relu(&v, k).unwrap();
            let mut order: Vec<usize> = (0..16).collect();
            order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
            let mut want = vec![0.0; 16];
            for &i in &order[..k] {
                want[i] = v[i].max(0.0);
            }
            prop_assert_eq!(out.iter().filter(|&&x| x != 0.0).count() <= k, true);
            prop_assert_eq!(out, want);
        }

        #[test]
        fn l0_never_exceeds_k(seed in 0u64..200) {
            let fam = SaeFamily::<f64>::new(Variant::TopkX8, &[Site::ResidPre(0)], 4, &SaeConfig { k: 3, expansion: 2, wide_expansion: 4 }, seed).unwrap();
            let mut rng = RngState::new(seed + 1);
            let h = Tensor::<f64>::randn([20, 4], 2.0, &mut rng);
            let z = fam.sae(0).unwrap().encode(&h).unwrap();
            for row in z.rows() {
                prop_assert!(row.iter().filter(|&&x| x != 0.0).count() <= 3);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn identity_autoencoder_reconstructs_nonnegative_input() {
        let d = 4;
        let mut fam = SaeFamily::<f64>::new(
            Variant::TopkX8,
            &[Site::ResidPre(0)],
            d,
            &SaeConfig { k: 4, expansion: 1, wide_expansion: 1 },
            0,
        )
        .unwrap();
        let eye = Tensor::from_fn([d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        fam.stores[0].w_enc = eye.clone();
        fam.stores[0].w_dec = eye;
        let h = Tensor::from_rows(&[vec![0.5, 2.0, 0.0, 1.0]]).unwrap();
        let sae = fam.sae(0).unwrap();
        assert_eq!(sae.reconstruct(&h).unwrap(), h);
        let mut out = vec![0.0; d];
        sae.decode_sparse(&Code::default(), &mut out);
        assert_eq!(out, sae.b_dec);
    }

    #[test]
    fn encode_decode_match_formula() {
        let mut fam =
            SaeFamily::<f64>::new(Variant::TopkX8, &[Site::ResidPre(0)], 5, &SaeConfig { k: 3, expansion: 2, wide_expansion: 2 }, 4)
                .unwrap();
        let mut rng = RngState::new(9);
        fam.members[0].b_enc = Tensor::randn([10], 0.3, &mut rng);
        fam.members[0].b_dec = Tensor::randn([5], 0.3, &mut rng);
        let h = Tensor::<f64>::randn([6, 5], 1.0, &mut rng);
        let sae = fam.sae(0).unwrap();
        let z = sae.encode(&h).unwrap();
        let recon = sae.decode(&z).unwrap();
        for r in 0..6 {
            let mut pre: Vec<f64> = (0..10)
                .map(|j| {
                    (0..5).map(|c| sae.w_enc.data()[j * 5 + c] * (h.row(r)[c] - sae.b_dec[c])).sum::<f64>() + sae.b_enc[j]
                })
                .collect();
            let mut order: Vec<usize> = (0..10).collect();
            order.sort_by(|&a, &b| pre[b].partial_cmp(&pre[a]).unwrap());
            for &j in &order[3..] {
                pre[j] = 0.0;
            }
            pre.iter_mut().for_each(|x| *x = x.max(0.0));
            for j in 0..10 {
                assert!((z.row(r)[j] - pre[j]).abs() < 1e-12);
            }
            for c in 0..5 {
                let want = sae.b_dec[c] + (0..10).map(|j| sae.w_dec.data()[c * 10 + j] * pre[j]).sum::<f64>();
                assert!((recon.row(r)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn staircase_widths_and_views() {
        let cfg = SaeConfig::default();
        let fam = SaeFamily::<f32>::new(Variant::StaircaseX8, &sites5(), 64, &cfg, 0).unwrap();
        assert_eq!(fam.stores.len(), 1);
        assert_eq!(fam.stores[0].width(), 5 * 512);
        assert_eq!(fam.staircase_member(3).unwrap().width, 1536);
        assert!(fam.staircase_member(0).is_err());
        assert!(fam.staircase_member(6).is_err());
        // Member 1 is a plain width-n SAE over the first chunk.
        let m1 = fam.staircase_member(1).unwrap();
        assert_eq!(m1.width, 512);
        assert_eq!(m1.enc_row(0), fam.stores[0].w_enc.row(0));
        assert_eq!(fam.sae_at(Site::ResidPost(0)).unwrap().width, 1024);
    }

    #[test]
    fn staircase_view_mutation_hits_shared_store() {
        let mut fam =
            SaeFamily::<f64>::new(Variant::StaircaseX8, &sites5(), 4, &SaeConfig { k: 2, expansion: 2, wide_expansion: 4 }, 1).unwrap();
        fam.staircase_member_mut(3).unwrap().w_enc.data_mut()[0] = 42.0;
        assert_eq!(fam.staircase_member(1).unwrap().enc_row(0)[0], 42.0);
        assert_eq!(fam.staircase_member(5).unwrap().enc_row(0)[0], 42.0);
    }

    #[test]
    fn suppressed_earlier_chunks_match_isolated_sae() {
        let (d, n) = (4, 8);
        let cfg = SaeConfig { k: 3, expansion: 2, wide_expansion: 4 };
        let mut fam = SaeFamily::<f64>::new(Variant::StaircaseX8, &sites5(), d, &cfg, 2).unwrap();
        let mut rng = RngState::new(5);
        let h = Tensor::<f64>::randn([32, d], 1.0, &mut rng);
        let i = 3;
        {
            let m = fam.staircase_member_mut(i).unwrap();
            let b = m.b_enc.data_mut();
            for x in &mut b[..n * (i - 1)] {
                *x = -1e9;
            }
            for x in &mut b[n * (i - 1)..] {
                *x = 0.1;
            }
        }
        let member = fam.staircase_member(i).unwrap();
        let z = member.encode(&h).unwrap();
        for row in z.rows() {
            assert!(row[..n * (i - 1)].iter().all(|&x| x == 0.0));
        }
        // An isolated SAE holding just chunk i.
        let w_enc = Tensor::new([n, d], member.w_enc.data()[n * (i - 1) * d..n * i * d].to_vec()).unwrap();
        let total = member.w_dec.shape()[1];
        let w_dec = Tensor::from_fn([d, n], |e| member.w_dec.data()[(e / n) * total + n * (i - 1) + e % n]);
        let b_enc = vec![0.1; n];
        let iso = SaeRef {
            site: Site::ResidPre(0),
            k: 3,
            width: n,
            w_enc: &w_enc,
            w_dec: &w_dec,
            b_enc: &b_enc,
            b_dec: member.b_dec,
        };
        let a = member.recon_loss(&h).unwrap();
        let b = iso.recon_loss(&h).unwrap();
        assert!((a - b).abs() <= 1e-6 * b.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn variant_zoo_parameter_relations() {
        let cfg = SaeConfig::default();
        let count = |v| SaeFamily::<f32>::new(v, &sites5(), 64, &cfg, 0).unwrap().parameter_count();
        let x8 = count(Variant::TopkX8);
        let stair = count(Variant::StaircaseX8);
        let overhead = stair as f64 / x8 as f64 - 1.0;
        assert!(overhead > 0.0 && overhead < 0.05, "{overhead}");
        assert_eq!(count(Variant::StaircaseDetach), stair);
        let tied = count(Variant::TopkX40Tied);
        assert!((tied as f64 / x8 as f64 - 1.0).abs() < 0.05);
        assert!(count(Variant::TopkX40) > 4 * x8);
        assert!(count(Variant::StaircaseUntiedX8) > 2 * x8);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let js = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&js).unwrap(), v);
        }
        assert!("topk".parse::<Variant>().is_err());
    }

    #[test]
    fn detach_members_only_train_own_chunk() {
        let fam = SaeFamily::<f32>::new(Variant::StaircaseDetach, &sites5(), 8, &SaeConfig { k: 2, expansion: 2, wide_expansion: 4 }, 0).unwrap();
        for m in &fam.members {
            assert_eq!(m.grad_from, 16 * (m.index - 1));
            assert_eq!(m.width, 16 * m.index);
        }
    }

    #[test]
    fn parts_round_trip() {
        let fam = SaeFamily::<f64>::new(Variant::StaircaseUntiedX8, &sites5(), 4, &SaeConfig { k: 2, expansion: 2, wide_expansion: 4 }, 3).unwrap();
        let tensors = fam.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = SaeFamily::from_parts(&fam.meta(), tensors).unwrap();
        assert_eq!(back, fam);
    }

    #[test]
    fn aliases_resolve() {
        assert!(same_value(Site::FfBlockOut(1), Site::ResidPre(2)));
        assert!(same_value(Site::ResidPost(0), Site::ResidPre(1)));
        assert!(!same_value(Site::FfBlockIn(1), Site::ResidPre(1)));
    }
}
