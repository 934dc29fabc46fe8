//! Jacobians between SAE latent spaces across a feedforward layer or a
//! feedforward block, the Jacobian-penalized pair loss, and its trainer.

mod train;

pub use train::{lambda_sweep, mean_jacobian_l1, train_jsae_pair, JsaeHistory, JsaeTrainConfig, SweepRow};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{DytParams, LmWeights, Segment};
use crate::sae::{Code, SaeRef, SaeVars};
use crate::tensor::{kernels, Scalar, Tape, Tensor, Var};

/// Penalty coefficients: E12 preferred numbers from 1 to 10, scaled by
/// 10⁻³, plus zero.
pub const LAMBDA_SWEEP: [f64; 13] = [0.0, 1e-3, 1.2e-3, 1.5e-3, 1.8e-3, 2.2e-3, 2.7e-3, 3.3e-3, 3.9e-3, 4.7e-3, 5.6e-3, 6.8e-3, 1e-2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JsaeConfig {
    pub lambda: f64,
    pub sweep: Vec<f64>,
}

impl Default for JsaeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            sweep: LAMBDA_SWEEP.to_vec(),
        }
    }
}

impl JsaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.sweep.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("Jacobian coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

/// Whether the pair brackets the MLP alone or the whole FF block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Layer,
    Block,
}

impl PairKind {
    pub fn of(seg: Segment) -> Result<Self> {
        match seg {
            Segment::FfLayer(_) => Ok(PairKind::Layer),
            Segment::FfBlock(_) => Ok(PairKind::Block),
            Segment::TransformerBlock(_) => Err(Error::invalid("Jacobian pairs span an FF layer or FF block only")),
        }
    }
}

/// The MLP of one block and, for the block variant, its input DyT.
#[derive(Clone, Copy, Debug)]
pub struct FfWeights<'a, S> {
    pub kind: PairKind,
    pub w1: &'a Tensor<S>,
    pub b1: &'a Tensor<S>,
    pub w2: &'a Tensor<S>,
    pub b2: &'a Tensor<S>,
    pub norm: &'a DytParams<Tensor<S>>,
}

impl<'a, S: Scalar> FfWeights<'a, S> {
    pub fn of(model: &'a LmWeights<S>, seg: Segment) -> Result<Self> {
        let kind = PairKind::of(seg)?;
        let l = model
            .params
            .layers
            .get(seg.layer())
            .ok_or_else(|| Error::UnknownSite(seg.up().to_string()))?;
        Ok(Self {
            kind,
            w1: &l.w1,
            b1: &l.b1,
            w2: &l.w2,
            b2: &l.b2,
            norm: &l.norm2,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn d_mlp(&self) -> usize {
        self.w1.shape()[0]
    }

    /// The segment applied to one row: `MLP(x)` or `x + MLP(DyT(x))`.
    pub fn apply_row(&self, x: &[S]) -> Vec<S> {
        let u = self.mlp_input(x);
        let mut z = vec![S::zero(); self.d_mlp()];
        kernels::linear_row(self.w1.data(), Some(self.b1.data()), &u, &mut z);
        z.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        let mut y = vec![S::zero(); self.d_model()];
        kernels::linear_row(self.w2.data(), Some(self.b2.data()), &z, &mut y);
        if self.kind == PairKind::Block {
            for (o, &xi) in y.iter_mut().zip(x) {
                *o += xi;
            }
        }
        y
    }

    pub(crate) fn mlp_input(&self, x: &[S]) -> Vec<S> {
        match self.kind {
            PairKind::Layer => x.to_vec(),
            PairKind::Block => {
                let mut u = vec![S::zero(); x.len()];
                let n = self.norm;
                kernels::dyt_row(x, n.alpha.data(), n.gamma.data(), n.beta.data(), &mut u);
                u
            }
        }
    }
}

/// The non-zero block of the latent-to-latent Jacobian: rows are the
/// downstream active latents, columns the upstream active latents.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveJacobian<S> {
    pub up: Vec<usize>,
    pub down: Vec<usize>,
    /// `[down.len() × up.len()]`.
    pub values: Tensor<S>,
}

impl<S: Scalar> ActiveJacobian<S> {
    pub fn l1(&self) -> f64 {
        self.values.data().iter().map(|v| v.f64().abs()).sum()
    }

    /// Entry for downstream latent `i`, upstream latent `j`; zero outside
    /// the active sets.
    pub fn get(&self, i: usize, j: usize) -> S {
        match (self.down.binary_search(&i), self.up.binary_search(&j)) {
            (Ok(r), Ok(c)) => self.values.data()[r * self.up.len() + c],
            _ => S::zero(),
        }
    }
}

/// Decoded point, downstream code and the MLP pre-activation there.
struct Point<S> {
    x_hat: Vec<S>,
    z: Vec<S>,
    down: Code<S>,
}

fn point<S: Scalar>(sae_x: &SaeRef<'_, S>, sae_y: &SaeRef<'_, S>, ff: &FfWeights<'_, S>, code: &Code<S>) -> Result<Point<S>> {
    let d = ff.d_model();
    if sae_x.d_model() != d || sae_y.d_model() != d {
        return Err(Error::shape("jacobian", &[sae_x.d_model(), sae_y.d_model()], &[d]));
    }
    if code.idx.iter().any(|&j| j >= sae_x.width) {
        return Err(Error::OutOfRange {
            what: "upstream latent",
            index: code.idx.iter().copied().max().unwrap_or(0),
            limit: sae_x.width,
        });
    }
    let mut x_hat = vec![S::zero(); d];
    sae_x.decode_sparse(code, &mut x_hat);
    let u = ff.mlp_input(&x_hat);
    let mut z = vec![S::zero(); ff.d_mlp()];
    kernels::linear_row(ff.w1.data(), Some(ff.b1.data()), &u, &mut z);
    let y = ff.apply_row(&x_hat);
    let down = sae_y.encode_row(&y);
    Ok(Point { x_hat, z, down })
}

/// `W2 · φ'(z) · W1 · (scale ⊙ W_dec[:, j])` for each upstream active `j`,
/// giving `[d × |K1|]` column-major as `|K1|` vectors of length `d`.
fn mlp_columns<S: Scalar>(sae_x: &SaeRef<'_, S>, ff: &FfWeights<'_, S>, up: &[usize], z: &[S], scale: Option<&[S]>) -> Vec<Vec<S>> {
    let (d, m) = (ff.d_model(), ff.d_mlp());
    let phi: Vec<S> = z.iter().map(|&v| kernels::gelu_grad(v)).collect();
    let mut a = vec![S::zero(); m];
    up.iter()
        .map(|&j| {
            let mut col = sae_x.dec_col(j);
            if let Some(s) = scale {
                col.iter_mut().zip(s).for_each(|(c, &si)| *c *= si);
            }
            kernels::linear_row(ff.w1.data(), None, &col, &mut a);
            a.iter_mut().zip(&phi).for_each(|(v, &p)| *v *= p);
            let mut out = vec![S::zero(); d];
            kernels::linear_row(ff.w2.data(), None, &a, &mut out);
            out
        })
        .collect()
}

/// `W_enc[K2, :] · cols`, as a `[|K2| × |K1|]` tensor.
fn project<S: Scalar>(sae_y: &SaeRef<'_, S>, down: &[usize], cols: &[Vec<S>]) -> Tensor<S> {
    let n1 = cols.len();
    Tensor::from_fn([down.len(), n1], |e| kernels::dot(sae_y.enc_row(down[e / n1]), &cols[e % n1]))
}

/// Active Jacobian across a bare MLP:
/// `W_enc_y[K2] · W2 · φ'(z) · W1 · W_dec_x[:, K1]`.
pub fn jacobian_ff_layer<S: Scalar>(
    sae_x: &SaeRef<'_, S>,
    sae_y: &SaeRef<'_, S>,
    ff: &FfWeights<'_, S>,
    code: &Code<S>,
) -> Result<ActiveJacobian<S>> {
    if ff.kind != PairKind::Layer {
        return Err(Error::invalid("jacobian_ff_layer needs FF-layer weights"));
    }
    let p = point(sae_x, sae_y, ff, code)?;
    let cols = mlp_columns(sae_x, ff, &code.idx, &p.z, None);
    Ok(ActiveJacobian {
        values: project(sae_y, &p.down.idx, &cols),
        up: code.idx.clone(),
        down: p.down.idx,
    })
}

/// Skip-path and MLP-path terms of the FF-block Jacobian, computed
/// separately over the same active sets.
pub fn ff_block_terms<S: Scalar>(
    sae_x: &SaeRef<'_, S>,
    sae_y: &SaeRef<'_, S>,
    ff: &FfWeights<'_, S>,
    code: &Code<S>,
) -> Result<(ActiveJacobian<S>, ActiveJacobian<S>)> {
    if ff.kind != PairKind::Block {
        return Err(Error::invalid("ff_block_terms needs FF-block weights"));
    }
    let p = point(sae_x, sae_y, ff, code)?;
    let mut dh = vec![S::zero(); ff.d_model()];
    kernels::dyt_grad_row(&p.x_hat, ff.norm.alpha.data(), ff.norm.gamma.data(), &mut dh);
    let mlp_cols = mlp_columns(sae_x, ff, &code.idx, &p.z, Some(&dh));
    let skip_cols: Vec<Vec<S>> = code.idx.iter().map(|&j| sae_x.dec_col(j)).collect();
    let skip = ActiveJacobian {
        values: project(sae_y, &p.down.idx, &skip_cols),
        up: code.idx.clone(),
        down: p.down.idx.clone(),
    };
    let mlp = ActiveJacobian {
        values: project(sae_y, &p.down.idx, &mlp_cols),
        up: code.idx.clone(),
        down: p.down.idx,
    };
    Ok((skip, mlp))
}

/// Active Jacobian across `x + MLP(DyT(x))`: the skip term plus the MLP
/// term.
pub fn jacobian_ff_block<S: Scalar>(
    sae_x: &SaeRef<'_, S>,
    sae_y: &SaeRef<'_, S>,
    ff: &FfWeights<'_, S>,
    code: &Code<S>,
) -> Result<ActiveJacobian<S>> {
    let (mut skip, mlp) = ff_block_terms(sae_x, sae_y, ff, code)?;
    for (a, &b) in skip.values.data_mut().iter_mut().zip(mlp.values.data()) {
        *a += b;
    }
    Ok(skip)
}

/// Dispatches on the pair kind.
pub fn jacobian<S: Scalar>(sae_x: &SaeRef<'_, S>, sae_y: &SaeRef<'_, S>, ff: &FfWeights<'_, S>, code: &Code<S>) -> Result<ActiveJacobian<S>> {
    match ff.kind {
        PairKind::Layer => jacobian_ff_layer(sae_x, sae_y, ff, code),
        PairKind::Block => jacobian_ff_block(sae_x, sae_y, ff, code),
    }
}

/// Tape variables of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct JsaeTerms {
    pub total: Var,
    pub recon_x: Var,
    pub recon_y: Var,
    /// Mean over the batch of the active-block L1 norm.
    pub jac: Var,
}

/// Everything the pair loss needs besides the batch.
#[derive(Clone, Copy, Debug)]
pub struct PairVars {
    pub x: SaeVars,
    pub y: SaeVars,
    pub width_x: usize,
    pub width_y: usize,
    pub k: usize,
}

/// `‖x − x'‖² + ‖y − y'‖² + λ·mean_b ‖J_b‖₁` on the tape. Both TopK
/// selections are constants of the forward pass; the Jacobian is taken at
/// the upstream reconstruction with the downstream active set of the
/// downstream SAE's encoding of the segment output there.
pub fn jsae_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pair: PairVars,
    ff: &FfWeights<'_, S>,
    x: Var,
    y: Var,
    lambda: f64,
) -> Result<JsaeTerms> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let (b, d) = tape.value(x).dims2()?;
    if tape.value(y).shape() != [b, d] {
        return Err(Error::shape("jsae_loss", &[b, d], tape.value(y).shape()));
    }
    if b == 0 {
        return Err(Error::Empty("JSAE batch"));
    }
    let k = pair.k;
    let inv_b = S::of(1.0 / b as f64);
    let (_, x_hat, act_x) = crate::sae::tape_encode_decode(tape, pair.x, pair.width_x, 0, k, x)?;
    let recon_x = sq_err(tape, x_hat, x, inv_b)?;
    let (_, y_hat, _) = crate::sae::tape_encode_decode(tape, pair.y, pair.width_y, 0, k, y)?;
    let recon_y = sq_err(tape, y_hat, y, inv_b)?;

    // Downstream active sets at the segment output of each reconstruction.
    let sae_y = SaeRef {
        site: crate::lm::Site::ResidPre(0),
        k,
        width: pair.width_y,
        w_enc: tape.value(pair.y.w_enc),
        w_dec: tape.value(pair.y.w_dec),
        b_enc: tape.value(pair.y.b_enc).data(),
        b_dec: tape.value(pair.y.b_dec).data(),
    };
    let xh = tape.value(x_hat).clone();
    let act_y: Vec<Vec<usize>> = xh.rows().map(|r| sae_y.encode_row(&ff.apply_row(r)).idx).collect();

    // Pad every active set to K; padded slots point at latent 0 and are
    // masked out of the penalty.
    let mut up_idx = Vec::with_capacity(b * k);
    let mut down_idx = Vec::with_capacity(b * k);
    let mut sample = Vec::with_capacity(b * k);
    let mut keep = Vec::with_capacity(b * k * k);
    for s in 0..b {
        for slot in 0..k {
            up_idx.push(act_x[s].get(slot).copied().unwrap_or(0));
            down_idx.push(act_y[s].get(slot).copied().unwrap_or(0));
            sample.push(s);
        }
        for i in 0..k {
            for j in 0..k {
                let live = i < act_y[s].len() && j < act_x[s].len();
                keep.push(if live { S::one() } else { S::zero() });
            }
        }
    }

    let w1 = tape.constant(ff.w1.clone());
    let b1 = tape.constant(ff.b1.clone());
    let w2 = tape.constant(ff.w2.clone());
    let m = ff.d_mlp();
    let u = match ff.kind {
        PairKind::Layer => x_hat,
        PairKind::Block => {
            let n = ff.norm;
            let (a, g, be) = (tape.constant(n.alpha.clone()), tape.constant(n.gamma.clone()), tape.constant(n.beta.clone()));
            tape.dyt(x_hat, a, g, be)?
        }
    };
    let z = tape.matmul_nt(u, w1)?;
    let z = tape.add_row(z, b1)?;
    let phi = tape.gelu_grad(z);
    let phi_rows = tape.gather_rows(phi, &sample)?;

    // Left factor: rows of W_enc_y · W2 for each downstream active latent,
    // scaled by φ'(z).
    let we_y = tape.slice_rows(pair.y.w_enc, pair.width_y, 0)?;
    let p = tape.matmul(we_y, w2)?;
    let left = tape.gather_rows(p, &down_idx)?;
    let left = tape.mul(left, phi_rows)?;
    let left = tape.reshape(left, [b, k, m])?;

    // Right factor: W1 · (∇h ⊙ W_dec_x[:, j]) for each upstream active j.
    let wd_x = tape.slice_cols(pair.x.w_dec, pair.width_x, 0)?;
    let dt = tape.transpose(wd_x)?;
    let cols = tape.gather_rows(dt, &up_idx)?;
    let scaled = match ff.kind {
        PairKind::Layer => cols,
        PairKind::Block => {
            let dh = tape.dyt_grad(x_hat, ff.norm.alpha.data(), ff.norm.gamma.data())?;
            let dh_rows = tape.gather_rows(dh, &sample)?;
            tape.mul(cols, dh_rows)?
        }
    };
    let right = tape.matmul_nt(scaled, w1)?;
    let right = tape.reshape(right, [b, k, m])?;
    let mut jac = tape.bmm_nt(left, right)?;

    if ff.kind == PairKind::Block {
        let enc_rows = tape.gather_rows(we_y, &down_idx)?;
        let enc_rows = tape.reshape(enc_rows, [b, k, d])?;
        let cols = tape.reshape(cols, [b, k, d])?;
        let skip = tape.bmm_nt(enc_rows, cols)?;
        jac = tape.add(jac, skip)?;
    }
    let jac = tape.mask(jac, keep)?;
    let jac = tape.abs(jac);
    let jac = tape.sum(jac);
    let jac = tape.scale(jac, inv_b);

    let recon = tape.add(recon_x, recon_y)?;
    let pen = tape.scale(jac, S::of(lambda));
    let total = tape.add(recon, pen)?;
    Ok(JsaeTerms {
        total,
        recon_x,
        recon_y,
        jac,
    })
}

fn sq_err<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var, inv_b: S) -> Result<Var> {
    let e = tape.sub(a, b)?;
    let sq = tape.square(e);
    let s = tape.sum(sq);
    Ok(tape.scale(s, inv_b))
}
