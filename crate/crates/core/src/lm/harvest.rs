use serde::{Deserialize, Serialize};

use super::{Corpus, LmWeights, Site, Split};
use crate::error::{Error, Result};
use crate::tensor::{RngState, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestConfig {
    pub sites: Vec<Site>,
    pub max_samples: usize,
    pub seq_len: usize,
    pub split: Split,
    pub seed: u64,
}

/// Activation vectors captured at several sites from the same forward
/// passes. Row `r` of every site tensor comes from one (block, position).
#[derive(Clone, Debug)]
pub struct Harvest<S> {
    pub sites: Vec<Site>,
    pub data: Vec<Tensor<S>>,
    /// `(block index within the split, position)` of each row.
    pub origin: Vec<(usize, usize)>,
}

impl<S: Scalar> Harvest<S> {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn site(&self, site: Site) -> Result<&Tensor<S>> {
        self.sites
            .iter()
            .position(|&s| s == site)
            .map(|i| &self.data[i])
            .ok_or_else(|| Error::UnknownSite(site.to_string()))
    }
}

/// Streams activations at `config.sites` over windows of a split and keeps a
/// seeded random subset of `min(max_samples, available)` positions.
pub fn harvest<S: Scalar>(w: &LmWeights<S>, corpus: &Corpus, config: &HarvestConfig) -> Result<Harvest<S>> {
    if config.sites.is_empty() {
        return Err(Error::Empty("harvest sites"));
    }
    for &s in &config.sites {
        w.config.check_site(s)?;
    }
    let blocks = corpus.blocks(config.split).len();
    let available = blocks * config.seq_len;
    let n = config.max_samples.min(available);
    if n == 0 {
        return Err(Error::Empty("harvest samples"));
    }
    let mut pick = RngState::new(config.seed).permutation(available);
    pick.truncate(n);
    // Visit each needed block once, in block order, and scatter its rows to
    // their place in the shuffled order.
    let mut by_block: Vec<(usize, usize, usize)> =
        pick.iter().enumerate().map(|(slot, &i)| (i / config.seq_len, i % config.seq_len, slot)).collect();
    by_block.sort_unstable();

    let d = w.config.d_model;
    let mut data: Vec<Vec<S>> = vec![vec![S::zero(); n * d]; config.sites.len()];
    let mut origin = vec![(0, 0); n];
    let mut i = 0;
    while i < by_block.len() {
        let b = by_block[i].0;
        let win = corpus.window(config.split, b, config.seq_len)?;
        let mut captured: Vec<Option<Tensor<S>>> = vec![None; config.sites.len()];
        w.forward_hooked(&win[..config.seq_len], &mut |s, x| {
            if let Some(j) = config.sites.iter().position(|&t| t == s) {
                captured[j] = Some(x.clone());
            }
            Ok(())
        })?;
        while i < by_block.len() && by_block[i].0 == b {
            let (_, pos, slot) = by_block[i];
            for (j, cap) in captured.iter().enumerate() {
                let row = cap.as_ref().expect("every site is visited").row(pos);
                data[j][slot * d..(slot + 1) * d].copy_from_slice(row);
            }
            origin[slot] = (b, pos);
            i += 1;
        }
    }
    let data = data
        .into_iter()
        .map(|v| Tensor::new(vec![n, d], v))
        .collect::<Result<_>>()?;
    Ok(Harvest {
        sites: config.sites.clone(),
        data,
        origin,
    })
}
