//! Binary dropout masks: tiled/transformed sampling for conv and attention
//! layers, and the rescaled mask application that keeps the scaled mask's
//! mean at one.

mod conv;
mod geom;
mod pgm;
mod schedule;
mod xfmr;

pub use conv::{sample_conv_mask, ConvPatternSpec, CONV_ROTATE, CONV_SHEAR, CONV_SIZE_K, CONV_STRIDE, REPEAT_MAX};
pub use geom::transform_cells;
pub use pgm::pgm_slices;
pub use schedule::RateSchedule;
pub use xfmr::{sample_transformer_mask, TransformerPatternSpec, XFMR_SIZE, XFMR_STRIDE};

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Binary multiplicative mask matching a target layer shape; entries ∈ {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<u8>,
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Mask {
            shape: shape.to_vec(),
            bits: vec![1; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b == 1)
    }

    /// Relabel the shape without touching the row-major bits, e.g. to apply
    /// an `[N, T, C]` draw to activations flattened as `[N·T, C]`.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.bits.len() {
            return Err(Error::contract(format!(
                "mask reshape {:?} -> {shape:?} changes the element count",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    fn flat(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> u8 {
        self.bits[self.flat(idx)]
    }

    pub(crate) fn zero(&mut self, idx: &[usize]) {
        let k = self.flat(idx);
        self.bits[k] = 0;
    }

    /// The mask with Eq.-style rescaling baked in: kept entries become
    /// `len/ones`, dropped entries exact zero. `None` when no entry is kept.
    pub fn scaled_tensor<T: Elem>(&self) -> Option<Tensor<T>> {
        let ones = self.count_ones();
        if ones == 0 {
            return None;
        }
        let scale = T::of(self.len() as f64 / ones as f64);
        Some(Tensor::from_fn(&self.shape, |i| {
            if self.bits[i] == 1 {
                scale
            } else {
                T::zero()
            }
        }))
    }
}

/// Counters for mask applications; degenerate (all-dropped) masks fall back
/// to identity rather than dividing by zero, and are observable here.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropStats {
    pub applied: u64,
    pub identity: u64,
    pub degenerate: u64,
}

/// Rescaled mask application: `h ⊙ (Size(m)/Sum(m))·m`.
///
/// All-ones masks return `h` bit-exactly (no arithmetic touches it); all-zero
/// masks do the same but count as a degenerate event.
pub fn drop<T: Elem>(h: &Tensor<T>, m: &Mask, stats: &mut DropStats) -> Result<Tensor<T>> {
    if h.shape() != m.shape() {
        return Err(Error::ShapeMismatch {
            op: "drop",
            lhs: h.shape().to_vec(),
            rhs: m.shape().to_vec(),
        });
    }
    let ones = m.count_ones();
    if ones == m.len() {
        stats.identity += 1;
        return Ok(h.clone());
    }
    if ones == 0 {
        stats.degenerate += 1;
        return Ok(h.clone());
    }
    stats.applied += 1;
    let scale = T::of(m.len() as f64 / ones as f64);
    let hd = h.data();
    Ok(Tensor::from_fn(h.shape(), |i| {
        if m.bits[i] == 1 {
            hd[i] * scale
        } else {
            T::zero()
        }
    }))
}

/// Tape-level counterpart of [`drop`]: multiplies by the scaled mask as a
/// constant. Identity and degenerate masks add no node at all, so a disabled
/// pattern leaves the computation graph bit-identical to no masking.
pub fn apply_drop<T: Elem>(
    tape: &mut Tape<T>,
    h: Var,
    m: &Mask,
    stats: &mut DropStats,
) -> Result<Var> {
    if tape.value(h).shape() != m.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_drop",
            lhs: tape.value(h).shape().to_vec(),
            rhs: m.shape().to_vec(),
        });
    }
    match m.scaled_tensor::<T>() {
        None => {
            stats.degenerate += 1;
            Ok(h)
        }
        Some(_) if m.is_all_ones() => {
            stats.identity += 1;
            Ok(h)
        }
        Some(scaled) => {
            stats.applied += 1;
            let c = tape.constant(scaled)?;
            tape.mul(h, c)
        }
    }
}
