//! Token-run masks for sequence activations `[N, T, C]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};

pub const XFMR_SIZE: [u32; 8] = [0, 10, 20, 30, 40, 50, 60, 70];
pub const XFMR_STRIDE: [u32; 5] = [0, 5, 10, 15, 20];

/// One attention-side dropout pattern: runs of `size` consecutive tokens
/// separated by `stride` untouched tokens, at a random phase. Within an
/// affected token, channels drop independently at the layer rate unless
/// `share_c` ties them together; `share_t` reuses one channel draw for the
/// whole run.
///
/// `size = 0` disables the pattern. `size ≥ T` with `stride = 0` affects
/// every token: combined with `share_t` that is variational dropout, and with
/// `share_c` (alone) it is word dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerPatternSpec {
    pub size: u32,
    pub stride: u32,
    pub share_t: bool,
    pub share_c: bool,
}

impl TransformerPatternSpec {
    pub fn validate(&self) -> Result<()> {
        if !XFMR_SIZE.contains(&self.size) {
            return Err(Error::contract(format!("size {} not in {XFMR_SIZE:?}", self.size)));
        }
        if !XFMR_STRIDE.contains(&self.stride) {
            return Err(Error::contract(format!("stride {} not in {XFMR_STRIDE:?}", self.stride)));
        }
        Ok(())
    }
}

/// Maximal runs of affected tokens in `[0, t_len)` for phase `phase` — the
/// pattern `((t − phase) mod (size + stride)) < size` restricted to the
/// sequence, so the first and last runs may be cut short by the boundaries.
pub(crate) fn token_runs(size: usize, stride: usize, t_len: usize, phase: usize) -> Vec<(usize, usize)> {
    let period = size + stride;
    let affected = |t: usize| (t + period - phase % period) % period < size;
    let mut runs = Vec::new();
    let mut t = 0;
    while t < t_len {
        if affected(t) {
            let start = t;
            while t < t_len && affected(t) {
                t += 1;
            }
            runs.push((start, t));
        } else {
            t += 1;
        }
    }
    runs
}

/// Sample a mask for an `[N, T, C]` activation. Each sequence draws its own
/// phase. `size = 0` and `rate = 0` return all-ones without consuming any
/// randomness.
///
/// RNG order per sequence: phase (skipped when `stride = 0`, where every
/// phase covers all tokens), then for each run (ascending) either one channel
/// draw (`share_t`) or one per token; a channel draw is a single uniform
/// under `share_c` and `C` uniforms otherwise. The skip keeps full-coverage
/// patterns stream-compatible with directly tied dropout implementations.
pub fn sample_transformer_mask(
    spec: &TransformerPatternSpec,
    shape: &[usize; 3],
    rate: f64,
    rng: &mut impl Rng,
) -> Result<Mask> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
        return Err(Error::contract(format!("drop rate {rate} outside [0, 1]")));
    }
    let &[n, t_len, c] = shape;
    if n == 0 || t_len == 0 || c == 0 {
        return Err(Error::contract(format!("empty mask shape {shape:?}")));
    }
    let mut mask = Mask::ones(shape);
    let size = spec.size as usize;
    let stride = spec.stride as usize;
    if size == 0 || rate == 0.0 {
        return Ok(mask);
    }
    let period = size + stride;
    for b in 0..n {
        let phase = if stride == 0 { 0 } else { rng.random_range(0..period) };
        for (start, end) in token_runs(size, stride, t_len, phase) {
            if spec.share_t {
                let row = draw_channel_row(c, spec.share_c, rate, rng);
                for t in start..end {
                    apply_row(&mut mask, b, t, &row);
                }
            } else {
                for t in start..end {
                    let row = draw_channel_row(c, spec.share_c, rate, rng);
                    apply_row(&mut mask, b, t, &row);
                }
            }
        }
    }
    Ok(mask)
}

fn draw_channel_row(c: usize, share_c: bool, rate: f64, rng: &mut impl Rng) -> Vec<bool> {
    if share_c {
        let dropped = rng.random::<f64>() < rate;
        vec![dropped; c]
    } else {
        (0..c).map(|_| rng.random::<f64>() < rate).collect()
    }
}

fn apply_row(mask: &mut Mask, b: usize, t: usize, row: &[bool]) {
    for (ch, &dropped) in row.iter().enumerate() {
        if dropped {
            mask.zero(&[b, t, ch]);
        }
    }
}
