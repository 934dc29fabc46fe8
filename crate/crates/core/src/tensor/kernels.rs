//! Slice-level numeric kernels shared by the tape and the inference paths.
//!
//! Every kernel accumulates in a fixed index order, so a row's result does
//! not depend on how many other rows are processed alongside it.

use super::Scalar;

const LANES: usize = 8;

/// Dot product with eight interleaved accumulators merged in fixed order.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        let (xa, xb) = (&a[base..base + LANES], &b[base..base + LANES]);
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut s = S::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            axpy(aik, &b[kk * n..(kk + 1) * n], out_row);
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            axpy(aik, br, &mut out[kk * n..(kk + 1) * n]);
        }
    }
}

/// `y += alpha · x`.
#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn transpose<S: Scalar>(a: &[S], out: &mut [S], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Linear layer on a single row: `out = W·x + b` with `W` stored `[out×in]`.
pub fn linear_row<S: Scalar>(w: &[S], b: Option<&[S]>, x: &[S], out: &mut [S]) {
    let d_in = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let mut v = dot(&w[o * d_in..(o + 1) * d_in], x);
        if let Some(b) = b {
            v += b[o];
        }
        *slot = v;
    }
}

pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation (GPT-2 convention).
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (S::one() + t)
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    let du = c * (S::one() + S::of(3.0) * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

#[inline]
pub fn gelu_grad2<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    let s = S::one() - t * t;
    let du = c * (S::one() + S::of(3.0) * a * x * x);
    let ddu = c * S::of(6.0) * a * x;
    s * du - x * t * s * du * du + half * x * s * ddu
}

/// `tanh(αx)·γ + β`, elementwise over one row.
pub fn dyt_row<S: Scalar>(x: &[S], alpha: &[S], gamma: &[S], beta: &[S], out: &mut [S]) {
    for i in 0..x.len() {
        out[i] = (alpha[i] * x[i]).tanh() * gamma[i] + beta[i];
    }
}

/// Diagonal of the DyT Jacobian, `αγ(1 − tanh²(αx))`.
pub fn dyt_grad_row<S: Scalar>(x: &[S], alpha: &[S], gamma: &[S], out: &mut [S]) {
    for i in 0..x.len() {
        let t = (alpha[i] * x[i]).tanh();
        out[i] = alpha[i] * gamma[i] * (S::one() - t * t);
    }
}

/// Causal multi-head attention over one sequence.
///
/// `q`, `k`, `v` and `out` are `[t×d]` with heads laid out contiguously
/// along `d`. `probs` receives `[heads×t×t]` attention weights (zero above
/// the diagonal).
pub fn causal_attention<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    t: usize,
    d: usize,
    heads: usize,
    out: &mut [S],
    probs: &mut [S],
) {
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..=i {
                prow[j] = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
            }
            softmax_in_place(&mut prow[..=i]);
            for p in prow[i + 1..].iter_mut() {
                *p = S::zero();
            }
            let orow = &mut out[i * d + off..i * d + off + dh];
            orow.iter_mut().for_each(|o| *o = S::zero());
            for j in 0..=i {
                axpy(prow[j], &v[j * d + off..j * d + off + dh], orow);
            }
        }
    }
}

/// Indices of the `k` largest entries (ties broken by lower index),
/// returned in ascending index order.
pub fn top_k_indices<S: Scalar>(values: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let k = k.min(values.len());
    if k < values.len() {
        idx.select_nth_unstable_by(k, |&a, &b| {
            values[b]
                .partial_cmp(&values[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// ReLU followed by keeping the `k` largest entries, in place.
/// Returns the indices of the surviving non-zero entries.
pub fn relu_topk_in_place<S: Scalar>(row: &mut [S], k: usize) -> Vec<usize> {
    for x in row.iter_mut() {
        if *x < S::zero() || x.is_nan() {
            *x = S::zero();
        }
    }
    let keep = top_k_indices(row, k);
    let mut active = Vec::with_capacity(keep.len());
    let mut cursor = 0;
    for (i, x) in row.iter_mut().enumerate() {
        if cursor < keep.len() && keep[cursor] == i {
            cursor += 1;
            if *x > S::zero() {
                active.push(i);
            }
        } else {
            *x = S::zero();
        }
    }
    active
}
