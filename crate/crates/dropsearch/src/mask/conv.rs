//! Tiled rectangle masks for image-shaped activations `[N, H, W, C]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geom::transform_cells;
use super::Mask;
use crate::error::{Error, Result};

pub const CONV_SIZE_K: [u32; 5] = [0, 1, 2, 3, 4];
pub const CONV_STRIDE: [u32; 5] = [1, 2, 4, 8, 16];
pub const REPEAT_MAX: u32 = 32;
pub const CONV_ROTATE: [f64; 6] = [0.0, 15.0, 30.0, 45.0, 60.0, 75.0];
/// Shear magnitudes 0.00 .. 0.55 in steps of 0.05.
pub const CONV_SHEAR: [f64; 12] = [
    0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55,
];

/// One conv dropout pattern: a grid of `side × side` rectangles (side scales
/// with the feature map as `size_k · ⌊d/5⌋`), separated by `stride` cells of
/// gap, geometrically perturbed, independently Bernoulli-dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvPatternSpec {
    pub size_k: u32,
    pub stride: u32,
    pub repeat: u32,
    pub rotate_max: f64,
    pub shear_x_max: f64,
    pub shear_y_max: f64,
    pub share_c: bool,
    pub residual: bool,
}

fn close_to_any(v: f64, table: &[f64]) -> bool {
    table.iter().any(|t| (v - t).abs() < 1e-9)
}

impl ConvPatternSpec {
    pub fn validate(&self) -> Result<()> {
        if !CONV_SIZE_K.contains(&self.size_k) {
            return Err(Error::contract(format!("size_k {} not in {CONV_SIZE_K:?}", self.size_k)));
        }
        if !CONV_STRIDE.contains(&self.stride) {
            return Err(Error::contract(format!("stride {} not in {CONV_STRIDE:?}", self.stride)));
        }
        if self.repeat < 1 || self.repeat > REPEAT_MAX {
            return Err(Error::contract(format!("repeat {} not in 1..={REPEAT_MAX}", self.repeat)));
        }
        if !close_to_any(self.rotate_max, &CONV_ROTATE) {
            return Err(Error::contract(format!("rotate_max {} not in {CONV_ROTATE:?}", self.rotate_max)));
        }
        for (name, v) in [("shear_x_max", self.shear_x_max), ("shear_y_max", self.shear_y_max)] {
            if !close_to_any(v, &CONV_SHEAR) {
                return Err(Error::contract(format!("{name} {v} not on the 0.00..0.55/0.05 grid")));
            }
        }
        Ok(())
    }

    /// Rectangle side on a feature map of extent `d`.
    pub fn side(&self, d: usize) -> usize {
        self.size_k as usize * (d / 5)
    }
}

/// Candidate rectangle origins in row-major order for a tiling with phase
/// `(oy, ox)`, `oy ∈ [0, side_h+stride)`. Origins may be negative (rectangle
/// clipped at the top/left edge); origins whose rectangle misses the grid
/// entirely are excluded.
pub(crate) fn tile_origins(
    side_h: usize,
    side_w: usize,
    stride: usize,
    h: usize,
    w: usize,
    oy: usize,
    ox: usize,
) -> Vec<(i64, i64)> {
    let axis = |side: usize, d: usize, o: usize| -> Vec<i64> {
        let period = (side + stride) as i64;
        let mut v = Vec::new();
        let partial = o as i64 - period;
        if partial + side as i64 > 0 {
            v.push(partial);
        }
        let mut c = o as i64;
        while c < d as i64 {
            v.push(c);
            c += period;
        }
        v
    };
    let ys = axis(side_h, h, oy);
    let xs = axis(side_w, w, ox);
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push((y, x));
        }
    }
    out
}

/// One pattern draw at a fixed phase: take the first `repeat` candidate
/// rectangles row-major, drop each with probability `rate`, clip to the grid,
/// then perturb the surviving cells.
///
/// RNG order: one uniform per taken rectangle, then (only when some transform
/// magnitude is positive) the rotation angle, x-shear, and y-shear.
pub(crate) fn pattern_cells_at(
    spec: &ConvPatternSpec,
    h: usize,
    w: usize,
    oy: usize,
    ox: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    let side_h = spec.side(h);
    let side_w = spec.side(w);
    let origins = tile_origins(side_h, side_w, spec.stride as usize, h, w, oy, ox);
    let mut cells = Vec::new();
    for &(cy, cx) in origins.iter().take(spec.repeat as usize) {
        if rng.random::<f64>() < rate {
            let y0 = cy.max(0) as usize;
            let y1 = ((cy + side_h as i64).min(h as i64)) as usize;
            let x0 = cx.max(0) as usize;
            let x1 = ((cx + side_w as i64).min(w as i64)) as usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    cells.push((y, x));
                }
            }
        }
    }
    if spec.rotate_max > 0.0 || spec.shear_x_max > 0.0 || spec.shear_y_max > 0.0 {
        let draw = |max: f64, rng: &mut dyn rand::RngCore| -> f64 {
            if max > 0.0 {
                rng.random_range(-max..=max)
            } else {
                0.0
            }
        };
        let angle = draw(spec.rotate_max, rng);
        let sx = draw(spec.shear_x_max, rng);
        let sy = draw(spec.shear_y_max, rng);
        cells = transform_cells(&cells, angle, sx, sy, h, w);
    }
    cells
}

/// Sample a mask for an `[N, H, W, C]` activation. Each image draws its own
/// pattern; with `share_c` one spatial pattern is broadcast across channels,
/// otherwise every channel draws independently.
///
/// `size_k = 0` (rectangles of side 0) and `rate = 0` return the all-ones
/// mask without consuming any randomness, so a disabled pattern leaves the
/// RNG stream untouched.
pub fn sample_conv_mask(
    spec: &ConvPatternSpec,
    shape: &[usize; 4],
    rate: f64,
    rng: &mut impl Rng,
) -> Result<Mask> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
        return Err(Error::contract(format!("drop rate {rate} outside [0, 1]")));
    }
    let &[n, h, w, c] = shape;
    if n == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::contract(format!("empty mask shape {shape:?}")));
    }
    let mut mask = Mask::ones(shape);
    let side_h = spec.side(h);
    let side_w = spec.side(w);
    if side_h == 0 || side_w == 0 || rate == 0.0 {
        return Ok(mask);
    }
    let period_y = side_h + spec.stride as usize;
    let period_x = side_w + spec.stride as usize;
    for b in 0..n {
        let draws = if spec.share_c { 1 } else { c };
        for ch in 0..draws {
            let oy = rng.random_range(0..period_y);
            let ox = rng.random_range(0..period_x);
            let cells = pattern_cells_at(spec, h, w, oy, ox, rate, rng);
            for (y, x) in cells {
                if spec.share_c {
                    for cc in 0..c {
                        mask.zero(&[b, y, x, cc]);
                    }
                } else {
                    mask.zero(&[b, y, x, ch]);
                }
            }
        }
    }
    Ok(mask)
}
