//! The toy character language model: GPT-2 style blocks with DynamicTanh
//! in place of LayerNorm, a trainer, and activation harvesting.

mod corpus;
mod forward;
mod harvest;
mod params;
mod site;
mod tokenizer;
mod train;

pub use corpus::{Corpus, Split};
pub use forward::{Segment, Trace};
#[cfg(test)]
pub(crate) use forward::dyt as forward_dyt;
pub use harvest::{harvest, Harvest, HarvestConfig};
pub use params::{DytParams, LayerParams, Params};
pub use site::Site;
pub use tokenizer::{detokenize, tokenize, REPLACEMENT_TOKEN};
pub use train::{evaluate, lm_loss_and_grads, train_lm, LmTrainConfig, TrainHistory};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngState, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub context: usize,
    /// Initial DyT α at every normalization site.
    pub dyt_alpha: f64,
    pub init_std: f64,
    /// Token and position embedding init. Without LayerNorm nothing rescales
    /// the residual stream, so this is much larger than `init_std`.
    pub embed_std: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            vocab: 128,
            n_heads: 4,
            d_mlp: 256,
            context: 128,
            dyt_alpha: 1.0,
            init_std: 0.05,
            embed_std: 0.5,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.d_mlp == 0 || self.context == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab != 128 {
            return bad(format!("the ASCII tokenizer needs vocab 128, got {}", self.vocab));
        }
        if !(self.dyt_alpha > 0.0) {
            return bad("DyT alpha must start positive".into());
        }
        Ok(())
    }

    /// Every hookable site, in forward order.
    pub fn sites(&self) -> Vec<Site> {
        (0..self.n_layers)
            .flat_map(|k| {
                [
                    Site::ResidPre(k),
                    Site::FfBlockIn(k),
                    Site::FfLayerIn(k),
                    Site::FfLayerOut(k),
                    Site::FfBlockOut(k),
                    Site::ResidPost(k),
                ]
            })
            .collect()
    }

    pub fn check_site(&self, site: Site) -> Result<()> {
        if site.layer() < self.n_layers {
            Ok(())
        } else {
            Err(Error::UnknownSite(site.to_string()))
        }
    }
}

/// Model weights plus the config that shapes them.
#[derive(Clone, Debug)]
pub struct LmWeights<S> {
    pub config: LmConfig,
    pub params: Params<Tensor<S>>,
}

impl<S: Scalar> LmWeights<S> {
    /// GPT-2 style init: N(0, std) matrices, output projections scaled by
    /// 1/√(2L), zero biases, DyT α at the configured value, γ = 1, β = 0.
    /// Embeddings use their own, larger scale.
    pub fn init(config: &LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(config.seed);
        let (d, m, v, std) = (config.d_model, config.d_mlp, config.vocab, config.init_std);
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let dyt = || DytParams {
            alpha: Tensor::full([d], S::of(config.dyt_alpha)),
            gamma: Tensor::ones([d]),
            beta: Tensor::zeros([d]),
        };
        let wte = Tensor::randn([v, d], config.embed_std, &mut rng);
        let wpe = Tensor::randn([config.context, d], config.embed_std, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                norm1: dyt(),
                w_q: Tensor::randn([d, d], std, &mut rng),
                b_q: Tensor::zeros([d]),
                w_k: Tensor::randn([d, d], std, &mut rng),
                b_k: Tensor::zeros([d]),
                w_v: Tensor::randn([d, d], std, &mut rng),
                b_v: Tensor::zeros([d]),
                w_o: Tensor::randn([d, d], proj_std, &mut rng),
                b_o: Tensor::zeros([d]),
                norm2: dyt(),
                w1: Tensor::randn([m, d], std, &mut rng),
                b1: Tensor::zeros([m]),
                w2: Tensor::randn([d, m], proj_std, &mut rng),
                b2: Tensor::zeros([d]),
            });
        }
        let w_u = Tensor::randn([d, v], std, &mut rng);
        Ok(Self {
            config: config.clone(),
            params: Params {
                wte,
                wpe,
                layers,
                norm_f: dyt(),
                w_u,
            },
        })
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.params.visit(|_, t| n += t.numel());
        n
    }

    /// Named tensors in the canonical order used for persistence.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        self.params.visit(|name, t| out.push((name.to_string(), t)));
        out
    }

    /// Rebuilds weights from named tensors, checking every shape.
    pub fn from_named(config: &LmConfig, tensors: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let mut w = Self::init(config)?;
        let mut map: std::collections::HashMap<String, Tensor<S>> = tensors.into_iter().collect();
        let mut missing = None;
        w.params.visit_mut(|name, t| match map.remove(name) {
            Some(src) if src.shape() == t.shape() => *t = src,
            Some(src) => {
                missing.get_or_insert_with(|| Error::shape("load weights", t.shape(), src.shape()));
            }
            None => {
                missing.get_or_insert_with(|| Error::Format(format!("missing tensor `{name}`")));
            }
        });
        if let Some(e) = missing {
            return Err(e);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(w)
    }
}
