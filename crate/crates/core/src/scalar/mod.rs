//! The SCALAR benchmark: edge-count sequences, subcircuit ablation curves,
//! areas under them, and percentage reductions between SAE variants.

mod engine;

pub use engine::{
    full_circuit_logits, logits_from_codes, subcircuit_forward, subcircuit_latents, subcircuit_latents_naive, RankIndex,
};

use serde::{Deserialize, Serialize};

use crate::attribution::{EdgeRanking, LatentMap};
use crate::error::{Error, Result};
use crate::lm::{Corpus, Split};
use crate::tensor::{Scalar, Tensor};

/// The published sequence for pairs of 512-wide SAEs.
pub const REFERENCE_SEQUENCE: [usize; 35] = [
    1, 2, 4, 5, 7, 11, 16, 22, 32, 45, 63, 90, 127, 181, 256, 362, 512, 724, 1024, 1448, 2048, 2896, 4095, 5792, 8191, 11585,
    16383, 23170, 32768, 46340, 65536, 92681, 131072, 185363, 262144,
];

/// Roughly √2-spaced edge counts from 1 to `total`, always ending at
/// `total`. For 512×512 pairs this is [`REFERENCE_SEQUENCE`].
pub fn edge_sequence(total: usize) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::invalid("edge sequence needs at least one edge"));
    }
    if total == 262_144 {
        return Ok(REFERENCE_SEQUENCE.to_vec());
    }
    let mut out: Vec<usize> = Vec::new();
    for m in 0.. {
        let v = 2f64.powf(m as f64 / 2.0).floor() as usize;
        if v >= total {
            break;
        }
        if out.last() != Some(&v) {
            out.push(v);
        }
    }
    out.push(total);
    Ok(out)
}

/// Which logits the subcircuit is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// The unmodified model.
    FullModel,
    /// Both sites replaced by reconstructions; the pure computational
    /// sparsity variant.
    FullCircuit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub reference: Reference,
    pub total_edges: usize,
    pub edges: Vec<usize>,
    /// Mean KL over positions and prompts, per edge count.
    pub mean_kl: Vec<f64>,
    /// `per_prompt[e][p]`: mean KL over positions of prompt `p`.
    pub per_prompt: Vec<Vec<f64>>,
}

/// `KL(p ‖ q)` per row of two logit tensors, in f64. Rounding can push
/// a vanishing divergence slightly negative; that is clamped to zero.
pub fn kl_rows<S: Scalar>(reference: &Tensor<S>, other: &Tensor<S>) -> Result<Vec<f64>> {
    if reference.shape() != other.shape() {
        return Err(Error::shape("kl_rows", reference.shape(), other.shape()));
    }
    let v = reference.last_dim();
    let log_softmax = |row: &[S]| {
        let m = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x.f64() - m).exp()).sum::<f64>().ln();
        row.iter().map(|x| x.f64() - lse).collect::<Vec<f64>>()
    };
    Ok(reference
        .data()
        .chunks(v)
        .zip(other.data().chunks(v))
        .map(|(a, b)| {
            let (la, lb) = (log_softmax(a), log_softmax(b));
            la.iter().zip(&lb).map(|(&x, &y)| x.exp() * (x - y)).sum::<f64>().max(0.0)
        })
        .collect())
}

/// The first `count` validation windows, `len` tokens each.
pub fn validation_prompts(corpus: &Corpus, count: usize, len: usize) -> Result<Vec<Vec<u32>>> {
    (0..count)
        .map(|i| corpus.window(Split::Val, i, len).map(|w| w[..len].to_vec()))
        .collect()
}

/// Ablation curves against each requested reference, sharing the
/// subcircuit passes.
pub fn ablation_curves<S: Scalar>(
    map: &LatentMap<'_, S>,
    prompts: &[Vec<u32>],
    ranking: &EdgeRanking,
    sequence: &[usize],
    references: &[Reference],
) -> Result<Vec<AblationCurve>> {
    if prompts.is_empty() {
        return Err(Error::Empty("SCALAR prompts"));
    }
    let idx = RankIndex::from_ranking(ranking)?;
    let total = idx.total();
    if sequence.is_empty() {
        return Err(Error::Empty("edge sequence"));
    }
    if let Some(&bad) = sequence.iter().find(|&&n| n > total) {
        return Err(Error::OutOfRange {
            what: "edge count",
            index: bad,
            limit: total,
        });
    }
    let mut per: Vec<Vec<Vec<f64>>> = vec![vec![Vec::with_capacity(prompts.len()); sequence.len()]; references.len()];
    for tokens in prompts {
        let prep = map.prepare(tokens)?;
        let refs: Vec<Tensor<S>> = references
            .iter()
            .map(|r| match r {
                Reference::FullModel => map.model.forward(tokens),
                Reference::FullCircuit => full_circuit_logits(map, &prep),
            })
            .collect::<Result<_>>()?;
        for (e, &n) in sequence.iter().enumerate() {
            let logits = subcircuit_forward(map, &prep, &idx, n as u64)?;
            for (r, rl) in refs.iter().enumerate() {
                let kl = kl_rows(rl, &logits)?;
                per[r][e].push(kl.iter().sum::<f64>() / kl.len() as f64);
            }
        }
    }
    Ok(references
        .iter()
        .zip(per)
        .map(|(&reference, per_prompt)| AblationCurve {
            reference,
            total_edges: total,
            edges: sequence.to_vec(),
            mean_kl: per_prompt.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect(),
            per_prompt,
        })
        .collect())
}

pub fn ablation_curve<S: Scalar>(
    map: &LatentMap<'_, S>,
    prompts: &[Vec<u32>],
    ranking: &EdgeRanking,
    sequence: &[usize],
    reference: Reference,
) -> Result<AblationCurve> {
    Ok(ablation_curves(map, prompts, ranking, sequence, &[reference])?.remove(0))
}

/// A value with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sem: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarScore {
    pub absolute: Estimate,
    pub relative: Estimate,
    pub total_edges: usize,
}

/// Trapezoidal area of a piecewise-linear curve.
pub fn trapezoid(x: &[usize], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) as f64 * (ys[0] + ys[1]) / 2.0)
        .sum()
}

fn sem(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Area under the curve on a linear edge axis. The uncertainty is the
/// standard error of the per-prompt areas.
pub fn auc(curve: &AblationCurve) -> Result<ScalarScore> {
    if curve.edges.len() < 2 {
        return Err(Error::invalid("an ablation curve needs at least two points"));
    }
    let absolute = trapezoid(&curve.edges, &curve.mean_kl);
    let prompts = curve.per_prompt.first().map_or(0, Vec::len);
    let areas: Vec<f64> = (0..prompts)
        .map(|p| {
            let y: Vec<f64> = curve.per_prompt.iter().map(|v| v[p]).collect();
            trapezoid(&curve.edges, &y)
        })
        .collect();
    let s = sem(&areas);
    let t = curve.total_edges as f64;
    Ok(ScalarScore {
        absolute: Estimate { value: absolute, sem: s },
        relative: Estimate {
            value: absolute / t,
            sem: s / t,
        },
        total_edges: curve.total_edges,
    })
}

/// Percentage reduction `100·(a − b)/a` of candidate `b` against baseline
/// `a`, with first-order error propagation. Positive means `b` is lower.
pub fn compare(a: Estimate, b: Estimate) -> Result<Estimate> {
    if a.value == 0.0 {
        return Err(Error::invalid("baseline score is zero"));
    }
    let value = 100.0 * (a.value - b.value) / a.value;
    let sem = 100.0 * ((b.sem / a.value).powi(2) + (b.value * a.sem / (a.value * a.value)).powi(2)).sqrt();
    Ok(Estimate { value, sem })
}

/// Sum of independent estimates.
pub fn sum(v: &[Estimate]) -> Estimate {
    Estimate {
        value: v.iter().map(|e| e.value).sum(),
        sem: v.iter().map(|e| e.sem * e.sem).sum::<f64>().sqrt(),
    }
}

/// Reduction of the summed scores across layers.
pub fn aggregate(baseline: &[Estimate], candidate: &[Estimate]) -> Result<Estimate> {
    if baseline.len() != candidate.len() || baseline.is_empty() {
        return Err(Error::invalid("aggregate needs matching, non-empty layer lists"));
    }
    compare(sum(baseline), sum(candidate))
}
