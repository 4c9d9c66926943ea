use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::GenomeLayout;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Network shape for the attention backend. Defaults follow the controller
/// used for the full search; tests shrink it so finite differences stay
/// affordable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
    pub init_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            layers: 4,
            hidden: 128,
            heads: 4,
            head_dim: 32,
            ffn: 32,
            init_std: 0.02,
        }
    }
}

impl PolicyConfig {
    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.head_dim == 0 || self.ffn == 0 {
            return Err(Error::contract(format!("degenerate policy config {self:?}")));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::contract(format!("init std {} must be positive", self.init_std)));
        }
        Ok(())
    }
}

const PARAMS_PER_LAYER: usize = 10;
const MASKED: f64 = -1e30;

/// Autoregressive policy: a BOS token plus the prefix tokens (each slot has
/// its own embedding table) run through a pre-LN causal transformer; slot
/// `s`'s logits are a per-slot linear head over the hidden state at position
/// `s`.
///
/// Because masked attention scores underflow to exactly zero weight, the
/// logits at position `s` are bit-identical whether the forward pass sees
/// only the prefix or the whole sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionPolicy {
    layout: GenomeLayout,
    cfg: PolicyConfig,
    params: ParamSet,
}

impl AttentionPolicy {
    pub fn new(layout: GenomeLayout, cfg: PolicyConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let proj = cfg.heads * cfg.head_dim;
        let s_total = layout.total_slots();
        let mut params = ParamSet::new();
        let mut w = |shape: &[usize]| Tensor::randn(shape, cfg.init_std, rng);
        params.add("bos", w(&[1, h]));
        params.add("pos", w(&[s_total, h]));
        for (s, card) in layout.flat_cards().into_iter().enumerate() {
            params.add(format!("emb{s}"), w(&[card, h]));
        }
        for l in 0..cfg.layers {
            params.add(format!("l{l}_ln1_g"), Tensor::ones(&[h]));
            params.add(format!("l{l}_ln1_b"), Tensor::zeros(&[h]));
            params.add(format!("l{l}_wq"), w(&[h, proj]));
            params.add(format!("l{l}_wk"), w(&[h, proj]));
            params.add(format!("l{l}_wv"), w(&[h, proj]));
            params.add(format!("l{l}_wo"), w(&[proj, h]));
            params.add(format!("l{l}_ln2_g"), Tensor::ones(&[h]));
            params.add(format!("l{l}_ln2_b"), Tensor::zeros(&[h]));
            params.add(format!("l{l}_w1"), w(&[h, cfg.ffn]));
            params.add(format!("l{l}_w2"), w(&[cfg.ffn, h]));
        }
        params.add("ln_f_g", Tensor::ones(&[h]));
        params.add("ln_f_b", Tensor::zeros(&[h]));
        for (s, card) in layout.flat_cards().into_iter().enumerate() {
            params.add(format!("head{s}_w"), w(&[h, card]));
            params.add(format!("head{s}_b"), Tensor::zeros(&[card]));
        }
        Ok(AttentionPolicy { layout, cfg, params })
    }

    pub fn layout(&self) -> GenomeLayout {
        self.layout
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    // parameter indices, fixed by construction order
    fn emb(&self, s: usize) -> usize {
        2 + s
    }
    fn layer(&self, l: usize) -> usize {
        2 + self.layout.total_slots() + l * PARAMS_PER_LAYER
    }
    fn ln_f(&self) -> usize {
        self.layer(self.cfg.layers)
    }
    fn head(&self, s: usize) -> usize {
        self.ln_f() + 2 + 2 * s
    }

    /// Hidden states after the final layer norm for the first `n_pos`
    /// positions (BOS followed by `tokens[..n_pos-1]`).
    fn forward(&self, tape: &mut Tape<f64>, leaves: &[Var], tokens: &[usize], n_pos: usize) -> Result<Var> {
        debug_assert!(n_pos >= 1 && n_pos <= self.layout.total_slots());
        let mut rows = vec![leaves[0]];
        for (j, &t) in tokens[..n_pos - 1].iter().enumerate() {
            rows.push(tape.embedding(leaves[self.emb(j)], &[t])?);
        }
        let x0 = tape.concat_rows(&rows)?;
        let pos = tape.slice_rows(leaves[1], 0, n_pos)?;
        let mut x = tape.add(x0, pos)?;
        let causal = tape.constant(Tensor::from_fn(&[n_pos, n_pos], |i| {
            if i % n_pos <= i / n_pos {
                0.0
            } else {
                MASKED
            }
        }))?;
        let d = self.cfg.head_dim;
        let scale = 1.0 / (d as f64).sqrt();
        for l in 0..self.cfg.layers {
            let b = self.layer(l);
            let a = tape.layer_norm(x, leaves[b], leaves[b + 1])?;
            let q = tape.matmul(a, leaves[b + 2])?;
            let k = tape.matmul(a, leaves[b + 3])?;
            let v = tape.matmul(a, leaves[b + 4])?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for hh in 0..self.cfg.heads {
                let qh = tape.slice_cols(q, hh * d, d)?;
                let kh = tape.slice_cols(k, hh * d, d)?;
                let vh = tape.slice_cols(v, hh * d, d)?;
                let kt = tape.transpose(kh)?;
                let sc = tape.matmul(qh, kt)?;
                let sc = tape.scale(sc, scale)?;
                let sc = tape.add(sc, causal)?;
                let at = tape.softmax(sc)?;
                heads.push(tape.matmul(at, vh)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let proj = tape.matmul(cat, leaves[b + 5])?;
            x = tape.add(x, proj)?;
            let f = tape.layer_norm(x, leaves[b + 6], leaves[b + 7])?;
            let h1 = tape.matmul(f, leaves[b + 8])?;
            let h1 = tape.relu(h1)?;
            let h2 = tape.matmul(h1, leaves[b + 9])?;
            x = tape.add(x, h2)?;
        }
        tape.layer_norm(x, leaves[self.ln_f()], leaves[self.ln_f() + 1])
    }

    fn logits_at(&self, tape: &mut Tape<f64>, leaves: &[Var], hidden: Var, s: usize) -> Result<Var> {
        let row = tape.slice_rows(hidden, s, 1)?;
        let z = tape.matmul(row, leaves[self.head(s)])?;
        tape.add_bias(z, leaves[self.head(s) + 1])
    }

    /// One full-sequence forward; logits node per slot.
    pub fn all_slot_logits(&self, tape: &mut Tape<f64>, leaves: &[Var], tokens: &[usize]) -> Result<Vec<Var>> {
        let s_total = self.layout.total_slots();
        if tokens.len() != s_total {
            return Err(Error::contract(format!(
                "expected {s_total} tokens, got {}",
                tokens.len()
            )));
        }
        let hidden = self.forward(tape, leaves, tokens, s_total)?;
        (0..s_total).map(|s| self.logits_at(tape, leaves, hidden, s)).collect()
    }

    /// Logits for the next slot after `prefix`.
    pub fn next_slot_logits(&self, tape: &mut Tape<f64>, leaves: &[Var], prefix: &[usize]) -> Result<Var> {
        let s = prefix.len();
        if s >= self.layout.total_slots() {
            return Err(Error::contract(format!("prefix of length {s} already complete")));
        }
        let hidden = self.forward(tape, leaves, prefix, s + 1)?;
        self.logits_at(tape, leaves, hidden, s)
    }
}
