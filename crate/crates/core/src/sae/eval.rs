use serde::{Deserialize, Serialize};

use super::{SaeFamily, SaeRef};
use crate::error::{Error, Result};
use crate::lm::{Corpus, LmWeights, Split};
use crate::tensor::{cross_entropy, Scalar, Tensor};

/// Validation cross-entropy with and without SAE reconstructions spliced in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpliceEval {
    pub clean_ce: f64,
    pub spliced_ce: f64,
    pub delta_ce: f64,
    pub windows: usize,
}

/// Replaces the activation at every SAE's site with its reconstruction and
/// measures the mean CE increase over the first `windows` blocks of `split`.
pub fn splice_eval<S: Scalar>(
    model: &LmWeights<S>,
    saes: &[SaeRef<'_, S>],
    corpus: &Corpus,
    split: Split,
    windows: usize,
    seq_len: usize,
) -> Result<SpliceEval> {
    for s in saes {
        model.config.check_site(s.site)?;
        if s.d_model() != model.config.d_model {
            return Err(Error::shape("splice_eval", &[s.d_model()], &[model.config.d_model]));
        }
    }
    let n = windows.min(corpus.blocks(split).len());
    if n == 0 {
        return Err(Error::Empty("splice_eval windows"));
    }
    let (mut clean, mut spliced) = (0.0, 0.0);
    for i in 0..n {
        let win = corpus.window(split, i, seq_len)?;
        let (inp, tgt) = (&win[..seq_len], targets(win));
        clean += cross_entropy(&model.forward(inp)?, &tgt)?.f64();
        let logits = model.forward_hooked(inp, &mut |site, x: &mut Tensor<S>| {
            for s in saes.iter().filter(|s| s.site == site) {
                *x = s.reconstruct(x)?;
            }
            Ok(())
        })?;
        spliced += cross_entropy(&logits, &tgt)?.f64();
    }
    let (clean, spliced) = (clean / n as f64, spliced / n as f64);
    Ok(SpliceEval {
        clean_ce: clean,
        spliced_ce: spliced,
        delta_ce: spliced - clean,
        windows: n,
    })
}

fn targets(win: &[u32]) -> Vec<usize> {
    win[1..].iter().map(|&t| t as usize).collect()
}

/// Mean number of active latents per feature chunk, for each member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkUsage {
    pub chunk: usize,
    /// `per_member[m][c]`: mean active count in chunk `c` for member `m`.
    pub per_member: Vec<Vec<f64>>,
    /// Staircase index of each member.
    pub index: Vec<usize>,
}

impl ChunkUsage {
    /// Fraction of member `m`'s active latents that fall in chunks before
    /// its own newest chunk.
    pub fn earlier_share(&self, m: usize) -> f64 {
        let u = &self.per_member[m];
        let total: f64 = u.iter().sum();
        let own = self.index[m].saturating_sub(1).min(u.len());
        if total == 0.0 || own == 0 {
            return 0.0;
        }
        u[..own].iter().sum::<f64>() / total
    }
}

pub fn chunk_usage<S: Scalar>(fam: &SaeFamily<S>, data: &[&Tensor<S>]) -> Result<ChunkUsage> {
    fam.check_data(data)?;
    let mut per_member = Vec::with_capacity(fam.members.len());
    for (m, x) in data.iter().enumerate() {
        let sae = fam.sae(m)?;
        let chunks = sae.width.div_ceil(fam.chunk);
        let mut counts = vec![0.0f64; chunks];
        let codes = sae.encode_sparse(x)?;
        for c in &codes {
            for &j in &c.idx {
                counts[j / fam.chunk] += 1.0;
            }
        }
        counts.iter_mut().for_each(|v| *v /= codes.len() as f64);
        per_member.push(counts);
    }
    Ok(ChunkUsage {
        chunk: fam.chunk,
        per_member,
        index: fam.members.iter().map(|m| m.index).collect(),
    })
}
