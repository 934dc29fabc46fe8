use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Numerically stable `log softmax` of one row.
pub fn log_softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for &x in row {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

/// Mean token cross-entropy of `logits [n×v]` against `targets`.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<S> {
    let (n, v) = logits.dims2()?;
    if n != targets.len() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    if n == 0 {
        return Err(Error::Empty("cross_entropy targets"));
    }
    let mut lp = vec![S::zero(); v];
    let mut total = S::zero();
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::OutOfRange {
                what: "target token",
                index: t,
                limit: v,
            });
        }
        log_softmax_row(logits.row(i), &mut lp);
        total -= lp[t];
    }
    Ok(total / S::of(n as f64))
}

/// Per-row `KL(softmax(p) ‖ softmax(q))` for two logit tensors.
pub fn kl_divergence_rows<S: Scalar>(p_logits: &Tensor<S>, q_logits: &Tensor<S>) -> Result<Vec<S>> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::shape("kl_divergence", p_logits.shape(), q_logits.shape()));
    }
    let v = p_logits.last_dim();
    let n = if v == 0 { 0 } else { p_logits.numel() / v };
    let mut lp = vec![S::zero(); v];
    let mut lq = vec![S::zero(); v];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        log_softmax_row(p_logits.row(i), &mut lp);
        log_softmax_row(q_logits.row(i), &mut lq);
        let mut kl = S::zero();
        for j in 0..v {
            let p = lp[j].exp();
            if p > S::zero() {
                kl += p * (lp[j] - lq[j]);
            }
        }
        // Rounding can push an exact zero slightly negative.
        out.push(kl.max(S::zero()));
    }
    Ok(out)
}

/// Mean over rows of `KL(softmax(p) ‖ softmax(q))`.
pub fn kl_divergence<S: Scalar>(p_logits: &Tensor<S>, q_logits: &Tensor<S>) -> Result<S> {
    let rows = kl_divergence_rows(p_logits, q_logits)?;
    if rows.is_empty() {
        return Err(Error::Empty("kl_divergence rows"));
    }
    let n = S::of(rows.len() as f64);
    Ok(rows.into_iter().sum::<S>() / n)
}
