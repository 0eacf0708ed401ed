//! Template-matching reader for lattice scenes.

use super::font::{GlyphId, NUM_GLYPHS};
use super::scene::Lattice;
use crate::codec::Image;

/// Minimum background-minus-ink luminance for a cell to count as inked.
pub const BLANK_CONTRAST: f64 = 0.15;

/// Reads one glyph per lattice cell in row-major order, skipping blank cells.
///
/// Each template is fitted to the cell luminance as `a + b * mask` by least
/// squares; the template with the lowest residual wins if its fitted ink
/// contrast `-b` clears [`BLANK_CONTRAST`].
pub fn toy_ocr(img: &Image, lattice: &Lattice) -> Vec<GlyphId> {
    let gray = img.gray();
    let masks: Vec<Vec<bool>> = (0..NUM_GLYPHS).map(|g| lattice.mask(g)).collect();
    let mut out = Vec::new();
    let mut cell = Vec::with_capacity(lattice.glyph_h * lattice.glyph_w);
    for row in 0..lattice.rows {
        for col in 0..lattice.cols {
            let (oy, ox) = lattice.glyph_origin(row, col);
            cell.clear();
            for y in 0..lattice.glyph_h {
                for x in 0..lattice.glyph_w {
                    cell.push(gray[(oy + y) * img.width() + ox + x]);
                }
            }
            let mut best: Option<(f64, f64, GlyphId)> = None;
            for (g, mask) in masks.iter().enumerate() {
                let (resid, b) = affine_fit(&cell, mask);
                if best.is_none_or(|(r, _, _)| resid < r) {
                    best = Some((resid, b, g));
                }
            }
            if let Some((_, b, g)) = best {
                if -b >= BLANK_CONTRAST {
                    out.push(g);
                }
            }
        }
    }
    out
}

/// Residual sum of squares and slope of `y ~ a + b * m`.
fn affine_fit(y: &[f64], mask: &[bool]) -> (f64, f64) {
    let (mut n1, mut s1, mut s0) = (0usize, 0.0, 0.0);
    for (&v, &m) in y.iter().zip(mask) {
        if m {
            n1 += 1;
            s1 += v;
        } else {
            s0 += v;
        }
    }
    let n0 = y.len() - n1;
    if n1 == 0 || n0 == 0 {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        return (y.iter().map(|v| (v - mean).powi(2)).sum(), 0.0);
    }
    // two-level fit: each group's mean
    let (m1, m0) = (s1 / n1 as f64, s0 / n0 as f64);
    let resid = y
        .iter()
        .zip(mask)
        .map(|(&v, &m)| (v - if m { m1 } else { m0 }).powi(2))
        .sum();
    (resid, m1 - m0)
}
