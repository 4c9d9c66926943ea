//! Geometric perturbation of a tiled cell pattern: rotation about the grid
//! center, then x-shear, then y-shear, with rounding to the lattice.
//!
//! Cells landing outside the grid are discarded and duplicates collapse, so
//! the output cardinality never exceeds the input's.

use std::collections::BTreeSet;

/// Apply a fixed rotation (degrees) and shear pair to `cells` on an `h`×`w`
/// grid. Rounding is half-away-from-zero (`f64::round`). Output is sorted
/// row-major and duplicate-free.
pub fn transform_cells(
    cells: &[(usize, usize)],
    angle_deg: f64,
    shear_x: f64,
    shear_y: f64,
    h: usize,
    w: usize,
) -> Vec<(usize, usize)> {
    if angle_deg == 0.0 && shear_x == 0.0 && shear_y == 0.0 {
        return cells.to_vec();
    }
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut out = BTreeSet::new();
    for &(y, x) in cells {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        // rotate about the center, then shear x by y, then shear y by x
        let rx = dx * cos - dy * sin;
        let ry = dx * sin + dy * cos;
        let hx = rx + shear_x * ry;
        let hy = ry + shear_y * hx;
        let ny = (cy + hy).round();
        let nx = (cx + hx).round();
        if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
            out.insert((ny as usize, nx as usize));
        }
    }
    out.into_iter().collect()
}
