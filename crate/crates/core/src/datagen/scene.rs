//! Procedural glyph scenes on a fixed cell lattice.

use serde::{Deserialize, Serialize};

use super::font::{glyph_pixel, GlyphId, GLYPH_H, GLYPH_W, NUM_GLYPHS};
use crate::codec::{Image, CHANNELS};
use crate::error::{contract, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
    /// Rendered glyph box in pixels; bitmaps are nearest-resampled into it.
    pub glyph_w: usize,
    pub glyph_h: usize,
    /// Peak deviation of the background texture around its base colour.
    pub texture_amplitude: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            rows: 4,
            cols: 4,
            glyph_w: 5,
            glyph_h: 7,
            texture_amplitude: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            contract!("lattice needs at least one cell");
        }
        if self.height % self.rows != 0 || self.width % self.cols != 0 {
            contract!(
                "{}x{} image does not split into {}x{} cells",
                self.height,
                self.width,
                self.rows,
                self.cols
            );
        }
        if self.rows * self.cols > NUM_GLYPHS {
            contract!("more cells than distinct glyphs");
        }
        let lat = self.lattice();
        if self.glyph_w < GLYPH_W || self.glyph_h < GLYPH_H {
            contract!("glyph box {}x{} smaller than bitmap", self.glyph_w, self.glyph_h);
        }
        if self.glyph_w > lat.cell_w || self.glyph_h > lat.cell_h {
            contract!("glyph box does not fit a {}x{} cell", lat.cell_h, lat.cell_w);
        }
        if !(0.0..=0.2).contains(&self.texture_amplitude) {
            contract!("texture amplitude {} outside [0, 0.2]", self.texture_amplitude);
        }
        Ok(())
    }

    pub fn lattice(&self) -> Lattice {
        let cell_h = self.height / self.rows.max(1);
        let cell_w = self.width / self.cols.max(1);
        Lattice {
            rows: self.rows,
            cols: self.cols,
            cell_h,
            cell_w,
            glyph_h: self.glyph_h,
            glyph_w: self.glyph_w,
            off_y: cell_h.saturating_sub(self.glyph_h) / 2,
            off_x: cell_w.saturating_sub(self.glyph_w) / 2,
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Cell geometry shared by the renderer and the OCR.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lattice {
    pub rows: usize,
    pub cols: usize,
    pub cell_h: usize,
    pub cell_w: usize,
    pub glyph_h: usize,
    pub glyph_w: usize,
    pub off_y: usize,
    pub off_x: usize,
}

impl Lattice {
    /// Top-left pixel of the glyph box in cell `(row, col)`.
    pub fn glyph_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (row * self.cell_h + self.off_y, col * self.cell_w + self.off_x)
    }

    /// Inked mask of glyph `g` at box resolution, row-major.
    pub fn mask(&self, g: GlyphId) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.glyph_h * self.glyph_w);
        for y in 0..self.glyph_h {
            for x in 0..self.glyph_w {
                m.push(glyph_pixel(g, y * GLYPH_H / self.glyph_h, x * GLYPH_W / self.glyph_w));
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Flat,
    Gradient,
    Waves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub texture: Texture,
    pub base: [f64; 3],
    pub ink: [f64; 3],
    /// Texture parameters: `[amplitude, angle, frequency, phase]`.
    pub params: [f64; 4],
}

impl Background {
    fn value(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        let [amp, angle, freq, phase] = self.params;
        let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
        let proj = u * angle.cos() + v * angle.sin();
        match self.texture {
            Texture::Flat => 0.0,
            Texture::Gradient => amp * 2.0 * proj,
            Texture::Waves => amp * (std::f64::consts::TAU * freq * proj + phase).sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub row: usize,
    pub col: usize,
    pub glyph: GlyphId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphScene {
    pub image: Image,
    pub caption: Vec<GlyphId>,
    pub grid: Vec<Placement>,
    pub background: Background,
}

/// Deterministic scene for `seed`: every cell holds a distinct glyph.
pub fn render_scene(seed: u64, cfg: &SceneConfig) -> Result<GlyphScene> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let texture = match rng.below(3) {
        0 => Texture::Flat,
        1 => Texture::Gradient,
        _ => Texture::Waves,
    };
    let tint = |rng: &mut Rng, lo: f64, hi: f64| {
        let l = rng.uniform_in(lo, hi);
        [0; 3].map(|_| (l + rng.uniform_in(-0.05, 0.05)).clamp(0.0, 1.0))
    };
    let base = tint(&mut rng, 0.65, 0.85);
    let ink = tint(&mut rng, 0.05, 0.3);
    let params = [
        cfg.texture_amplitude * rng.uniform_in(0.5, 1.0),
        rng.uniform_in(0.0, std::f64::consts::TAU),
        rng.uniform_in(0.5, 2.0),
        rng.uniform_in(0.0, std::f64::consts::TAU),
    ];
    let background = Background {
        texture,
        base,
        ink,
        params,
    };

    // partial Fisher-Yates: distinct glyphs per scene
    let n = cfg.cells();
    let mut pool: Vec<GlyphId> = (0..NUM_GLYPHS).collect();
    for i in 0..n {
        let j = i + rng.below(NUM_GLYPHS - i);
        pool.swap(i, j);
    }
    let caption = pool[..n].to_vec();
    let grid: Vec<Placement> = caption
        .iter()
        .enumerate()
        .map(|(k, &glyph)| Placement {
            row: k / cfg.cols,
            col: k % cfg.cols,
            glyph,
        })
        .collect();

    let (h, w) = (cfg.height, cfg.width);
    let mut img = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let t = background.value(y, x, h, w);
            for c in 0..CHANNELS {
                img.set(y, x, c, base[c] + t);
            }
        }
    }
    let lat = cfg.lattice();
    for p in &grid {
        let (oy, ox) = lat.glyph_origin(p.row, p.col);
        for (k, inked) in lat.mask(p.glyph).into_iter().enumerate() {
            if inked {
                for c in 0..CHANNELS {
                    img.set(oy + k / lat.glyph_w, ox + k % lat.glyph_w, c, ink[c]);
                }
            }
        }
    }
    Ok(GlyphScene {
        image: img.quantized_8bit(),
        caption,
        grid,
        background,
    })
}
