//! Pluggable `Perf(r)` evaluators: a synthetic oracle with a known optimum,
//! a toy convolutional classifier, and a toy attention language model, plus
//! the uniform random-search baseline driver.
//!
//! Every evaluator is a deterministic function of `(genome, seed)`. Datasets
//! are generated procedurally from the spec seed at construction, so all jobs
//! of one search score against the same data; the per-call seed drives
//! parameter initialization, minibatch order, and mask draws through
//! independent [`mix_seed`] streams.

pub mod random;
pub use random::random_search;
mod toy_conv;
mod toy_lm;


pub use toy_conv::ToyConvReward;
pub use toy_lm::ToyLmReward;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mix_seed;
use crate::space::{uniform_random_genome, GenomeLayout, PatternGenome, SiteLayout, TargetKind};

// Stream tags for deriving independent RNGs from one seed.
pub(crate) const STREAM_DATA: u64 = 0x01;
pub(crate) const STREAM_INIT: u64 = 0x02;
pub(crate) const STREAM_MASK: u64 = 0x03;
pub(crate) const STREAM_BATCH: u64 = 0x04;
pub(crate) const STREAM_TARGET: u64 = 0x05;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalKind {
    Synthetic,
    ToyConv,
    ToyLm,
}

/// Evaluator configuration. One struct covers all kinds; fields that a kind
/// does not use are ignored by it (the synthetic oracle ignores everything
/// except `space`, `sites`, `conv_groups`, `lambda`, and `seed`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub kind: EvalKind,
    /// Space the synthetic oracle scores over (toy evaluators fix their own).
    pub space: TargetKind,
    /// Transformer site subset; `None` means all eight sites.
    pub sites: Option<Vec<String>>,
    /// Layer groups of a conv genome (the toy classifier always uses 2).
    pub conv_groups: usize,
    /// Sharpness of the synthetic oracle: `perf = exp(−λ·mismatches)`.
    pub lambda: f64,
    /// Seed for procedural data and the synthetic target genome.
    pub seed: u64,
    pub train_steps: usize,
    pub batch_size: usize,
    /// Top of the linear layer-wise rate ramp (flat rate for the LM).
    pub final_rate: f64,
    pub lr: f64,
    /// Training examples (images, or corpus sequences for the LM).
    pub n_train: usize,
    /// Held-out examples scored by the final evaluation pass.
    pub n_val: usize,
    /// Pixel noise of the bars dataset. The default sits just below the
    /// learnability threshold so masking strength maps onto a wide accuracy
    /// range instead of saturating at 1.0.
    pub noise: f64,
    /// Fraction of `n_train` actually used; 1.0 except in scarce-data runs.
    pub train_fraction: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            kind: EvalKind::Synthetic,
            space: TargetKind::Transformer,
            sites: None,
            conv_groups: 2,
            lambda: 1.0,
            seed: 0,
            train_steps: 60,
            batch_size: 8,
            final_rate: 0.3,
            lr: 0.02,
            n_train: 128,
            n_val: 64,
            noise: 1.5,
            train_fraction: 1.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_steps > 2_000 {
            return Err(Error::Config(format!(
                "train_steps {} exceeds the desk-scale cap of 2000",
                self.train_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.final_rate) {
            return Err(Error::Config(format!("final_rate {} outside [0, 1]", self.final_rate)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive and finite", self.lr)));
        }
        if self.n_train < self.batch_size || self.n_val == 0 {
            return Err(Error::Config(format!(
                "need n_train ≥ batch_size and n_val ≥ 1, got {}/{}/{}",
                self.n_train, self.batch_size, self.n_val
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0, 1]",
                self.train_fraction
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be positive", self.lambda)));
        }
        if self.conv_groups == 0 {
            return Err(Error::Config("conv_groups must be ≥ 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be ≥ 0", self.noise)));
        }
        Ok(())
    }

    /// The genome layout this spec scores.
    pub fn layout(&self) -> Result<GenomeLayout> {
        match self.kind {
            EvalKind::ToyConv => GenomeLayout::conv(2),
            EvalKind::ToyLm => Ok(GenomeLayout::transformer(&SiteLayout::full())),
            EvalKind::Synthetic => match self.space {
                TargetKind::Conv => GenomeLayout::conv(self.conv_groups),
                TargetKind::Transformer => {
                    let sites = match &self.sites {
                        None => SiteLayout::full(),
                        Some(names) => {
                            let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
                            SiteLayout::subset(&refs)?
                        }
                    };
                    Ok(GenomeLayout::transformer(&sites))
                }
            },
        }
    }
}

/// Outcome of one evaluation: the scalar reward plus scalar metrics and the
/// per-step training loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub perf: f64,
    pub metrics: BTreeMap<String, f64>,
    pub train_loss: Vec<f64>,
}

impl EvalResult {
    pub(crate) fn bare(perf: f64) -> Self {
        EvalResult { perf, metrics: BTreeMap::new(), train_loss: Vec::new() }
    }
}

/// A reward evaluator. `evaluate` must be a pure function of
/// `(genome, seed)`: two invocations agree bit-exactly.
pub trait RewardFn: Send + Sync {
    fn name(&self) -> &'static str;
    fn layout(&self) -> &GenomeLayout;
    fn evaluate(&self, genome: &PatternGenome, seed: u64) -> Result<EvalResult>;
}

/// Construct the evaluator a spec describes.
pub fn build_reward(spec: &RewardSpec) -> Result<Box<dyn RewardFn>> {
    spec.validate()?;
    Ok(match spec.kind {
        EvalKind::Synthetic => Box::new(SyntheticReward::new(spec.layout()?, spec.seed, spec.lambda)?),
        EvalKind::ToyConv => Box::new(ToyConvReward::new(spec.clone())?),
        EvalKind::ToyLm => Box::new(ToyLmReward::new(spec.clone())?),
    })
}

/// Oracle with a planted optimum: `perf = exp(−λ·d)` where `d` counts slots
/// whose token differs from a hidden target genome. The unique maximum 1.0
/// sits exactly at the target, which makes search progress checkable without
/// training anything. Ignores the per-call seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticReward {
    layout: GenomeLayout,
    target: PatternGenome,
    lambda: f64,
}

impl SyntheticReward {
    pub fn new(layout: GenomeLayout, seed: u64, lambda: f64) -> Result<Self> {
        let mut rng = stream_rng(seed, STREAM_TARGET);
        let target = uniform_random_genome(&layout, &mut rng);
        Self::with_target(layout, target, lambda)
    }

    pub fn with_target(layout: GenomeLayout, target: PatternGenome, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {lambda} must be positive")));
        }
        target.matches_layout(&layout)?;
        Ok(SyntheticReward { layout, target, lambda })
    }

    pub fn target(&self) -> &PatternGenome {
        &self.target
    }

    /// Per-slot mismatch count against the hidden target.
    pub fn mismatch(&self, genome: &PatternGenome) -> usize {
        genome
            .flat_tokens()
            .iter()
            .zip(self.target.flat_tokens())
            .filter(|&(&a, b)| a != b)
            .count()
    }
}

impl RewardFn for SyntheticReward {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn layout(&self) -> &GenomeLayout {
        &self.layout
    }

    fn evaluate(&self, genome: &PatternGenome, _seed: u64) -> Result<EvalResult> {
        genome.matches_layout(&self.layout)?;
        let d = self.mismatch(genome);
        let mut res = EvalResult::bare((-self.lambda * d as f64).exp());
        res.metrics.insert("mismatch".into(), d as f64);
        Ok(res)
    }
}
