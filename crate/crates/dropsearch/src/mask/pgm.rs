use super::Mask;
use crate::error::{Error, Result};

/// Render a mask as plain-PGM (P2) documents, one per 2-D slice: kept cells
/// white (255), dropped cells black. Rank-4 masks `[N, H, W, C]` yield one
/// `H×W` image per `(image, channel)`; rank-3 masks `[N, T, C]` one `T×C`
/// image per sequence. Returns `(file_stem, contents)` pairs.
pub fn pgm_slices(mask: &Mask) -> Result<Vec<(String, String)>> {
    match *mask.shape() {
        [n, h, w, c] => {
            let mut out = Vec::with_capacity(n * c);
            for b in 0..n {
                for ch in 0..c {
                    let body = render(h, w, |y, x| mask.get(&[b, y, x, ch]));
                    out.push((format!("n{b}_c{ch}"), body));
                }
            }
            Ok(out)
        }
        [n, t, c] => {
            let mut out = Vec::with_capacity(n);
            for b in 0..n {
                let body = render(t, c, |row, col| mask.get(&[b, row, col]));
                out.push((format!("n{b}"), body));
            }
            Ok(out)
        }
        ref s => Err(Error::contract(format!("cannot render mask of shape {s:?} as PGM"))),
    }
}

fn render(rows: usize, cols: usize, bit: impl Fn(usize, usize) -> u8) -> String {
    let mut s = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                s.push(' ');
            }
            s.push_str(if bit(r, c) == 1 { "255" } else { "0" });
        }
        s.push('\n');
    }
    s
}
