//! Autoregressive categorical policy over genomes, trained by REINFORCE with
//! a moving-average baseline and an importance-sampling correction that lets
//! stale samples (drawn from an older parameter snapshot) contribute to the
//! current update.

mod attention;
mod factorized;

pub use attention::{AttentionPolicy, PolicyConfig};
pub use factorized::FactorizedPolicy;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{GenomeLayout, PatternGenome};
use crate::tensor::{Adam, ParamSet, Tape, Tensor, Var};

/// A genome together with the policy state it was drawn from: its
/// log-probability at sampling time and the parameter version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub genome: PatternGenome,
    pub logp_old: f64,
    pub theta_version: u64,
}

/// Moving average of observed performance; seeds itself with the first
/// observation so early updates are not biased toward zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    momentum: f64,
    b: Option<f64>,
}

impl BaselineState {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::contract(format!("baseline momentum {momentum} outside [0, 1)")));
        }
        Ok(BaselineState { momentum, b: None })
    }

    pub fn value(&self) -> Option<f64> {
        self.b
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn observe(&mut self, perf: f64) {
        self.b = Some(match self.b {
            None => perf,
            Some(b) => self.momentum * b + (1.0 - self.momentum) * perf,
        });
    }
}

/// Training knobs for [`Controller`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub lr: f64,
    pub batch_m: usize,
    pub entropy_coef: f64,
    pub baseline_momentum: f64,
    /// Symmetric importance-ratio clip: ratios outside `[1/c, c]` are clamped
    /// and counted. `None` uses the raw ratio.
    pub ratio_clip: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            lr: 0.00035,
            batch_m: 16,
            entropy_coef: 1e-5,
            baseline_momentum: 0.95,
            ratio_clip: None,
        }
    }
}

impl ControllerConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::contract(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_m == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return Err(Error::contract(format!(
                "entropy coefficient {} must be non-negative",
                self.entropy_coef
            )));
        }
        if let Some(c) = self.ratio_clip {
            if !(c.is_finite() && c > 1.0) {
                return Err(Error::contract(format!("ratio clip bound {c} must exceed 1")));
            }
        }
        Ok(())
    }
}

/// Either policy network. Both emit per-slot conditional logits over the
/// genome's flattened token sequence; the factorized backend is the
/// exhaustively verifiable reference, the attention backend conditions each
/// slot on the sampled prefix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum PolicyBackend {
    Factorized(FactorizedPolicy),
    Attention(AttentionPolicy),
}

impl PolicyBackend {
    pub fn layout(&self) -> GenomeLayout {
        match self {
            PolicyBackend::Factorized(p) => p.layout(),
            PolicyBackend::Attention(p) => p.layout(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            PolicyBackend::Factorized(p) => p.params(),
            PolicyBackend::Attention(p) => p.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            PolicyBackend::Factorized(p) => p.params_mut(),
            PolicyBackend::Attention(p) => p.params_mut(),
        }
    }

    /// Logits nodes for every slot, conditioned on `tokens` as the prefix
    /// context (slot `s` sees tokens `0..s`). One node per slot, shape
    /// `[1, card_s]` or `[card_s]`.
    fn all_slot_logits(&self, tape: &mut Tape<f64>, leaves: &[Var], tokens: &[usize]) -> Result<Vec<Var>> {
        match self {
            PolicyBackend::Factorized(p) => p.all_slot_logits(leaves),
            PolicyBackend::Attention(p) => p.all_slot_logits(tape, leaves, tokens),
        }
    }

    /// Next-token distribution given a prefix, as plain probabilities.
    fn next_slot_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let leaves = self.params().leaf_all(&mut tape)?;
        let slot = prefix.len();
        let logits = match self {
            PolicyBackend::Factorized(p) => p.slot_logits(leaves[slot]),
            PolicyBackend::Attention(p) => p.next_slot_logits(&mut tape, &leaves, prefix)?,
        };
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).data().to_vec())
    }
}

/// Sum over slots of the chosen tokens' log-softmax values.
fn logp_node(tape: &mut Tape<f64>, logits: &[Var], tokens: &[usize]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (s, &tok) in tokens.iter().enumerate() {
        let lsm = tape.log_softmax(logits[s])?;
        let term = tape.pick(lsm, tok)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::contract("genome has no tokens"))
}

/// Sum over slots of the conditional distributions' entropies.
fn entropy_node(tape: &mut Tape<f64>, logits: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &z in logits {
        let p = tape.softmax(z)?;
        let lsm = tape.log_softmax(z)?;
        let plogp = tape.mul(p, lsm)?;
        let s = tape.sum(plogp)?;
        let h = tape.scale(s, -1.0)?;
        total = Some(match total {
            None => h,
            Some(t) => tape.add(t, h)?,
        });
    }
    total.ok_or_else(|| Error::contract("policy has no slots"))
}

/// Outcome summary of one `reinforce_update`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub mean_perf: f64,
    pub baseline_used: f64,
    pub mean_ratio: f64,
    pub clipped: u64,
    pub mean_entropy: f64,
    pub loss: f64,
    /// Parameter version after applying this update.
    pub theta_version: u64,
}

/// The search policy: a backend network, its optimizer, the perf baseline,
/// and a version counter that stamps samples for staleness correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Controller {
    backend: PolicyBackend,
    config: ControllerConfig,
    adam: Adam,
    baseline: BaselineState,
    version: u64,
    clipped_total: u64,
}

impl Controller {
    pub fn new(backend: PolicyBackend, config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Controller {
            adam: Adam::new(config.lr),
            baseline: BaselineState::new(config.baseline_momentum)?,
            backend,
            config,
            version: 0,
            clipped_total: 0,
        })
    }

    pub fn factorized(layout: GenomeLayout, config: ControllerConfig) -> Result<Self> {
        Self::new(PolicyBackend::Factorized(FactorizedPolicy::new(layout)), config)
    }

    pub fn attention(
        layout: GenomeLayout,
        policy: PolicyConfig,
        config: ControllerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let net = AttentionPolicy::new(layout, policy, rng)?;
        Self::new(PolicyBackend::Attention(net), config)
    }

    pub fn layout(&self) -> GenomeLayout {
        self.backend.layout()
    }

    pub fn backend(&self) -> &PolicyBackend {
        &self.backend
    }

    /// Mutable access to the policy parameters. Exists for gradient
    /// verification (finite-difference probes must perturb entries in place);
    /// search code never needs it.
    pub fn backend_mut(&mut self) -> &mut PolicyBackend {
        &mut self.backend
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn baseline(&self) -> &BaselineState {
        &self.baseline
    }

    pub fn clipped_total(&self) -> u64 {
        self.clipped_total
    }

    /// Draw a genome slot-by-slot from the conditional softmax. The returned
    /// log-probability is recomputed through [`Controller::logp`], so the two
    /// agree exactly.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<(PatternGenome, f64)> {
        let layout = self.layout();
        let mut tokens = Vec::with_capacity(layout.total_slots());
        for _ in 0..layout.total_slots() {
            let probs = self.backend.next_slot_probs(&tokens)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            tokens.push(chosen);
        }
        let genome = layout.genome_from_flat(&tokens)?;
        let logp = self.logp(&genome)?;
        Ok((genome, logp))
    }

    /// Sample and stamp with the current parameter version.
    pub fn sample_record(&self, rng: &mut impl Rng) -> Result<SampleRecord> {
        let (genome, logp_old) = self.sample(rng)?;
        Ok(SampleRecord { genome, logp_old, theta_version: self.version })
    }

    /// Exact log-probability of `genome` under the current parameters.
    pub fn logp(&self, genome: &PatternGenome) -> Result<f64> {
        genome.matches_layout(&self.layout())?;
        let mut tape = Tape::new();
        let leaves = self.backend.params().leaf_all(&mut tape)?;
        let tokens = genome.flat_tokens();
        let logits = self.backend.all_slot_logits(&mut tape, &leaves, &tokens)?;
        let lp = logp_node(&mut tape, &logits, &tokens)?;
        Ok(tape.value(lp).item())
    }

    /// Log-probability and its gradient w.r.t. every parameter, in parameter
    /// order. Provided for estimator verification and diagnostics.
    pub fn logp_and_grad(&self, genome: &PatternGenome) -> Result<(f64, Vec<Tensor<f64>>)> {
        genome.matches_layout(&self.layout())?;
        let mut tape = Tape::new();
        let params = self.backend.params();
        let leaves = params.leaf_all(&mut tape)?;
        let tokens = genome.flat_tokens();
        let logits = self.backend.all_slot_logits(&mut tape, &leaves, &tokens)?;
        let lp = logp_node(&mut tape, &logits, &tokens)?;
        let value = tape.value(lp).item();
        let grads = tape.backward(lp)?;
        let out = leaves
            .iter()
            .enumerate()
            .map(|(i, &v)| match grads.get(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(params.get(i).shape()),
            })
            .collect();
        Ok((value, out))
    }

    /// Total conditional entropy of the policy. Exact for the factorized
    /// backend; a Monte Carlo average over `n_paths` sampled prefixes for the
    /// attention backend.
    pub fn entropy(&self, rng: &mut impl Rng, n_paths: usize) -> Result<f64> {
        match &self.backend {
            PolicyBackend::Factorized(_) => {
                let tokens = vec![0; self.layout().total_slots()];
                Ok(self.path_entropy(&tokens)?)
            }
            PolicyBackend::Attention(_) => {
                if n_paths == 0 {
                    return Err(Error::contract("entropy needs at least one sample path"));
                }
                let mut total = 0.0;
                for _ in 0..n_paths {
                    let (genome, _) = self.sample(rng)?;
                    total += self.path_entropy(&genome.flat_tokens())?;
                }
                Ok(total / n_paths as f64)
            }
        }
    }

    fn path_entropy(&self, tokens: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = self.backend.params().leaf_all(&mut tape)?;
        let logits = self.backend.all_slot_logits(&mut tape, &leaves, tokens)?;
        let h = entropy_node(&mut tape, &logits)?;
        Ok(tape.value(h).item())
    }

    /// Loss value and raw gradient of the surrogate objective
    /// `−(1/M) Σᵢ (perfᵢ − b)·ratioᵢ·logpᵢ − β·(1/M) Σᵢ Hᵢ`, with the
    /// importance ratio `exp(logp − logp_old)` treated as a constant weight.
    /// Returns `(loss, grads, clipped_count, mean_ratio, mean_entropy)`.
    pub fn surrogate_grad(
        &self,
        batch: &[(SampleRecord, f64)],
        baseline: f64,
    ) -> Result<(f64, Vec<Tensor<f64>>, u64, f64, f64)> {
        let m = batch.len() as f64;
        let mut tape = Tape::new();
        let params = self.backend.params();
        let leaves = params.leaf_all(&mut tape)?;
        let mut loss: Option<Var> = None;
        let mut clipped = 0u64;
        let mut ratio_sum = 0.0;
        let mut entropy_sum = 0.0;
        for (record, perf) in batch {
            record.genome.matches_layout(&self.layout())?;
            let tokens = record.genome.flat_tokens();
            let logits = self.backend.all_slot_logits(&mut tape, &leaves, &tokens)?;
            let lp = logp_node(&mut tape, &logits, &tokens)?;
            let lp_now = tape.value(lp).item();
            let mut ratio = (lp_now - record.logp_old).exp();
            if let Some(c) = self.config.ratio_clip {
                let clamped = ratio.clamp(1.0 / c, c);
                if clamped != ratio {
                    clipped += 1;
                    ratio = clamped;
                }
            }
            if !ratio.is_finite() {
                return Err(Error::contract(format!(
                    "importance ratio overflowed (logp {lp_now}, logp_old {})",
                    record.logp_old
                )));
            }
            ratio_sum += ratio;
            let coeff = (perf - baseline) * ratio / m;
            let term = tape.scale(lp, -coeff)?;
            loss = Some(match loss {
                None => term,
                Some(l) => tape.add(l, term)?,
            });
            if self.config.entropy_coef > 0.0 {
                let h = entropy_node(&mut tape, &logits)?;
                entropy_sum += tape.value(h).item();
                let hterm = tape.scale(h, -self.config.entropy_coef / m)?;
                loss = Some(tape.add(loss.unwrap(), hterm)?);
            }
        }
        let loss = loss.ok_or_else(|| Error::contract("empty batch"))?;
        let loss_value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let out: Vec<Tensor<f64>> = leaves
            .iter()
            .enumerate()
            .map(|(i, &v)| match grads.get(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(params.get(i).shape()),
            })
            .collect();
        Ok((loss_value, out, clipped, ratio_sum / m, entropy_sum / m))
    }

    /// One policy-gradient step from a full batch of evaluated samples.
    /// The baseline used for centering is the moving average *before* this
    /// batch (the batch mean on the very first update); the baseline then
    /// absorbs the batch mean once, and the parameter version advances.
    pub fn reinforce_update(&mut self, batch: &[(SampleRecord, f64)]) -> Result<UpdateStats> {
        if batch.len() != self.config.batch_m {
            return Err(Error::contract(format!(
                "batch has {} records, configured batch size is {}",
                batch.len(),
                self.config.batch_m
            )));
        }
        for (record, perf) in batch {
            if !perf.is_finite() {
                return Err(Error::contract(format!("non-finite perf {perf}")));
            }
            if !record.logp_old.is_finite() {
                return Err(Error::contract(format!("non-finite logp_old {}", record.logp_old)));
            }
            if record.theta_version > self.version {
                return Err(Error::contract(format!(
                    "sample stamped with future version {} (current {})",
                    record.theta_version, self.version
                )));
            }
        }
        let mean_perf = batch.iter().map(|(_, p)| p).sum::<f64>() / batch.len() as f64;
        let baseline_used = self.baseline.value().unwrap_or(mean_perf);
        let (loss, grads, clipped, mean_ratio, mean_entropy) = self.surrogate_grad(batch, baseline_used)?;
        let refs: Vec<&Tensor<f64>> = grads.iter().collect();
        self.adam.step(self.backend.params_mut(), &refs)?;
        self.baseline.observe(mean_perf);
        self.version += 1;
        self.clipped_total += clipped;
        Ok(UpdateStats {
            mean_perf,
            baseline_used,
            mean_ratio,
            clipped,
            mean_entropy,
            loss,
            theta_version: self.version,
        })
    }
}
