use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionConfig;
use crate::error::{Error, Result};
use crate::jsae::{JsaeTrainConfig, LAMBDA_SWEEP};
use crate::lm::{LmConfig, LmTrainConfig, Segment, Site};
use crate::sae::{SaeConfig, SaeTrainConfig, Variant};
use crate::scalar::Reference;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Where a pair of SAEs sits: around the MLP, the FF block, or the whole
/// transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    FfLayer,
    FfBlock,
    TransformerBlock,
}

impl SegmentKind {
    pub fn at(self, k: usize) -> Segment {
        match self {
            SegmentKind::FfLayer => Segment::FfLayer(k),
            SegmentKind::FfBlock => Segment::FfBlock(k),
            SegmentKind::TransformerBlock => Segment::TransformerBlock(k),
        }
    }

    pub fn of(seg: Segment) -> Self {
        match seg {
            Segment::FfLayer(_) => SegmentKind::FfLayer,
            Segment::FfBlock(_) => SegmentKind::FfBlock,
            Segment::TransformerBlock(_) => SegmentKind::TransformerBlock,
        }
    }

    pub fn name(self) -> &'static str {
        self.at(0).family()
    }

    /// Site groups trained as one family each, in staircase order. A
    /// transformer-block family spans the whole residual stream; FF kinds
    /// get one input/output family per block.
    pub fn families(self, n_layers: usize) -> Vec<Vec<Site>> {
        match self {
            SegmentKind::TransformerBlock => vec![(0..n_layers)
                .map(Site::ResidPre)
                .chain(n_layers.checked_sub(1).map(Site::ResidPost))
                .collect()],
            _ => (0..n_layers).map(|k| vec![self.at(k).up(), self.at(k).down()]).collect(),
        }
    }

    /// Position in [`SegmentKind::families`] of the family serving block `k`.
    pub fn family_of(self, k: usize) -> usize {
        match self {
            SegmentKind::TransformerBlock => 0,
            _ => k,
        }
    }

    /// File stem of family `f`.
    pub fn family_name(self, f: usize) -> String {
        match self {
            SegmentKind::TransformerBlock => self.name().to_string(),
            _ => format!("{}.{f}", self.name()),
        }
    }
}

/// Seeds for every stochastic stage. `--seed` sets them all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub split: u64,
    pub lm: u64,
    pub harvest: u64,
    pub sae: u64,
    pub attribution: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            split: seed,
            lm: seed,
            harvest: seed,
            sae: seed,
            attribution: seed,
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::all(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeStage {
    pub variants: Vec<Variant>,
    pub segments: Vec<SegmentKind>,
    pub config: SaeConfig,
    pub train: SaeTrainConfig,
    /// Activation rows harvested per site.
    pub samples: usize,
    /// Validation windows for the splice-in ΔCE of each member.
    pub splice_windows: usize,
}

impl Default for SaeStage {
    fn default() -> Self {
        Self {
            variants: vec![Variant::TopkX8, Variant::StaircaseX8],
            segments: vec![SegmentKind::FfBlock, SegmentKind::TransformerBlock],
            config: SaeConfig::default(),
            train: SaeTrainConfig {
                steps: 600,
                ..SaeTrainConfig::default()
            },
            samples: 32_768,
            splice_windows: 16,
        }
    }
}

/// Jacobian SAE pairs, one per coefficient per segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JsaeStage {
    /// FF-layer or FF-block segments; empty skips the stage.
    pub segments: Vec<Segment>,
    pub lambdas: Vec<f64>,
    pub train: JsaeTrainConfig,
    /// The coefficient whose pairs enter SCALAR as variant `jsae`.
    pub score_lambda: Option<f64>,
}

impl Default for JsaeStage {
    /// Desk scale: the two ends of the sweep around one FF block.
    fn default() -> Self {
        Self {
            segments: vec![Segment::FfBlock(1)],
            lambdas: vec![0.0, 1e-2],
            train: JsaeTrainConfig::default(),
            score_lambda: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalarStage {
    pub prompts: usize,
    pub prompt_len: usize,
    pub references: Vec<Reference>,
    /// `(baseline, candidate)` variant labels for the reduction tables.
    pub comparisons: Vec<(String, String)>,
}

impl Default for ScalarStage {
    fn default() -> Self {
        Self {
            prompts: 10,
            prompt_len: 64,
            references: vec![Reference::FullModel, Reference::FullCircuit],
            comparisons: vec![("topk-x8".into(), "staircase-x8".into())],
        }
    }
}

/// Everything a pipeline run depends on. No field is filled from the clock
/// or the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Text file to ingest; `None` uses the bundled sonnets.
    pub corpus: Option<PathBuf>,
    pub precision: Precision,
    pub seeds: Seeds,
    pub lm: LmConfig,
    pub lm_train: LmTrainConfig,
    pub sae: SaeStage,
    pub jsae: JsaeStage,
    /// Segment layers scored; empty means every layer.
    pub layers: Vec<usize>,
    pub attribution: AttributionConfig,
    pub scalar: ScalarStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            precision: Precision::F32,
            seeds: Seeds::default(),
            lm: LmConfig::default(),
            lm_train: LmTrainConfig::default(),
            sae: SaeStage::default(),
            jsae: JsaeStage::default(),
            layers: Vec::new(),
            attribution: AttributionConfig {
                samples: 128,
                ..AttributionConfig::default()
            },
            scalar: ScalarStage::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }

    /// Restores the attribution, prompt and sweep budgets of the original
    /// study.
    pub fn full_scale(mut self) -> Self {
        self.attribution.samples = 576;
        self.attribution.terms = 5;
        self.scalar.prompts = 50;
        self.jsae.lambdas = LAMBDA_SWEEP.to_vec();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::all(seed);
        self
    }

    pub fn layers(&self) -> Vec<usize> {
        if self.layers.is_empty() {
            (0..self.lm.n_layers).collect()
        } else {
            self.layers.clone()
        }
    }

    /// Variant labels scored by SCALAR, in report order.
    pub fn scored_variants(&self) -> Vec<String> {
        let mut v: Vec<String> = self.sae.variants.iter().map(|v| v.name().to_string()).collect();
        if self.jsae.score_lambda.is_some() {
            v.push(JSAE_LABEL.to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if let Some(&k) = self.layers.iter().find(|&&k| k >= self.lm.n_layers) {
            return bad(format!("layer {k} does not exist in a {}-layer model", self.lm.n_layers));
        }
        for s in &self.jsae.segments {
            crate::jsae::PairKind::of(*s)?;
            if s.layer() >= self.lm.n_layers {
                return bad(format!("JSAE segment {s} does not exist"));
            }
        }
        if self.jsae.lambdas.iter().any(|&l| !(l >= 0.0)) {
            return bad("Jacobian coefficients must be non-negative".into());
        }
        if let Some(l) = self.jsae.score_lambda {
            if !self.jsae.lambdas.contains(&l) {
                return bad(format!("score_lambda {l} is not among the trained coefficients"));
            }
        }
        if self.sae.variants.is_empty() {
            return bad("no SAE variants selected".into());
        }
        if self.scalar.prompts == 0 || self.scalar.prompt_len == 0 || self.scalar.prompt_len >= self.lm.context {
            return bad(format!(
                "SCALAR needs at least one prompt of 1..{} tokens",
                self.lm.context - 1
            ));
        }
        if self.lm_train.seq_len > self.lm.context {
            return bad(format!("LM training windows of {} exceed the context", self.lm_train.seq_len));
        }
        if self.attribution.seq_len > self.lm.context {
            return bad("attribution positions exceed the context".into());
        }
        let labels = self.scored_variants();
        for (a, b) in &self.scalar.comparisons {
            if !labels.contains(a) || !labels.contains(b) {
                return bad(format!("comparison {a} vs {b} names an unscored variant"));
            }
        }
        Ok(())
    }

    /// FNV-1a of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(serde_json::to_string(self).expect("config serializes").as_bytes());
        h.finish()
    }
}

pub const JSAE_LABEL: &str = "jsae";
