use serde::{Deserialize, Serialize};

use super::tokenize;
use crate::error::{Error, Result};
use crate::tensor::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// A tokenized corpus cut into fixed-length blocks, with a seeded 90/10
/// assignment of blocks to the train and validation splits.
///
/// A block holds `block_len` tokens, enough for one full-context window plus
/// its shifted targets. The ragged tail is dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    pub block_len: usize,
    pub train_blocks: Vec<usize>,
    pub val_blocks: Vec<usize>,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], context: usize, seed: u64) -> Result<Self> {
        Self::from_tokens(tokenize(bytes), context, seed)
    }

    pub fn from_tokens(tokens: Vec<u32>, context: usize, seed: u64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let block_len = context + 1;
        let n_blocks = tokens.len() / block_len;
        if n_blocks < 2 {
            return Err(Error::invalid(format!(
                "corpus of {} tokens is too short for two blocks of {block_len}",
                tokens.len()
            )));
        }
        let n_val = (n_blocks / 10).max(1);
        let mut order = RngState::new(seed).permutation(n_blocks);
        let mut val_blocks: Vec<usize> = order.drain(..n_val).collect();
        let mut train_blocks = order;
        val_blocks.sort_unstable();
        train_blocks.sort_unstable();
        Ok(Self {
            tokens,
            block_len,
            train_blocks,
            val_blocks,
        })
    }

    pub fn blocks(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_blocks,
            Split::Val => &self.val_blocks,
        }
    }

    /// Tokens of block `b`.
    pub fn block(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.block_len..(b + 1) * self.block_len]
    }

    /// The first `len + 1` tokens of the `i`-th block of a split: an input
    /// window and its targets.
    pub fn window(&self, split: Split, i: usize, len: usize) -> Result<&[u32]> {
        let blocks = self.blocks(split);
        let &b = blocks.get(i).ok_or(Error::OutOfRange {
            what: "corpus window",
            index: i,
            limit: blocks.len(),
        })?;
        if len + 1 > self.block_len {
            return Err(Error::invalid(format!(
                "window of {len} exceeds the context {}",
                self.block_len - 1
            )));
        }
        Ok(&self.block(b)[..len + 1])
    }

    /// A random training window of `len + 1` tokens.
    pub fn sample_train(&self, len: usize, rng: &mut RngState) -> &[u32] {
        let b = self.train_blocks[rng.below(self.train_blocks.len())];
        let off = rng.below(self.block_len - len);
        &self.block(b)[off..off + len + 1]
    }
}
