//! Images and the identity patch codec that maps them to latent token grids.

use sha2::{Digest, Sha256};

use crate::error::{contract, Result};
use crate::numerics::{Real, Tensor};

pub const CHANNELS: usize = 3;

/// RGB image, row-major `[height, width, 3]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            contract!("image dimensions must be positive");
        }
        if data.len() != height * width * CHANNELS {
            contract!(
                "image {}x{} needs {} values, got {}",
                height,
                width,
                height * width * CHANNELS,
                data.len()
            );
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    /// Channel-mean luminance, row-major.
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| p.iter().sum::<f64>() / CHANNELS as f64)
            .collect()
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Rounds every value to the nearest multiple of `1/255`.
    pub fn quantized_8bit(mut self) -> Self {
        self.data
            .iter_mut()
            .for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        self
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// SHA-256 over the dims and the little-endian f64 values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Latent token grid: `[grid_h * grid_w, dim]` tokens in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub tokens: Tensor<T>,
}

impl<T: Real> LatentGrid<T> {
    pub fn new(grid_h: usize, grid_w: usize, tokens: Tensor<T>) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] != grid_h * grid_w {
            contract!(
                "tokens {:?} do not form a {}x{} grid",
                tokens.shape(),
                grid_h,
                grid_w
            );
        }
        Ok(Self {
            grid_h,
            grid_w,
            tokens,
        })
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn with_tokens(&self, tokens: Tensor<T>) -> Result<Self> {
        Self::new(self.grid_h, self.grid_w, tokens)
    }
}

pub fn token_dim(patch: usize) -> usize {
    CHANNELS * patch * patch
}

/// Non-overlapping `patch x patch x 3` blocks flattened in `(py, px, c)` order.
pub fn encode<T: Real>(img: &Image, patch: usize) -> Result<LatentGrid<T>> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        contract!(
            "image {}x{} not divisible by patch {}",
            img.height,
            img.width,
            patch
        );
    }
    let (gh, gw) = (img.height / patch, img.width / patch);
    let dim = token_dim(patch);
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..CHANNELS {
                        out.push(T::from_f64_lossy(img.get(gy * patch + py, gx * patch + px, c)));
                    }
                }
            }
        }
    }
    LatentGrid::new(gh, gw, Tensor::new(&[gh * gw, dim], out)?)
}

/// Exact inverse of [`encode`] without clamping.
pub fn decode_unclamped<T: Real>(lat: &LatentGrid<T>, patch: usize) -> Result<Image> {
    if lat.dim() != token_dim(patch) {
        contract!(
            "token dim {} does not match patch {} (expected {})",
            lat.dim(),
            patch,
            token_dim(patch)
        );
    }
    let (h, w) = (lat.grid_h * patch, lat.grid_w * patch);
    let mut img = Image::filled(h, w, 0.0);
    let dim = lat.dim();
    let data = lat.tokens.data();
    for gy in 0..lat.grid_h {
        for gx in 0..lat.grid_w {
            let base = (gy * lat.grid_w + gx) * dim;
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..CHANNELS {
                        img.set(gy * patch + py, gx * patch + px, c, data[base + k].as_f64());
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Inverse of [`encode`], clamped to `[0, 1]`.
pub fn decode<T: Real>(lat: &LatentGrid<T>, patch: usize) -> Result<Image> {
    Ok(decode_unclamped(lat, patch)?.clamped())
}

/// Bilinear resize by an integer factor (half-pixel centers, edge clamp).
pub fn upsample_bilinear(img: &Image, factor: usize) -> Image {
    let (h, w) = (img.height * factor, img.width * factor);
    let f = factor as f64;
    let mut out = Image::filled(h, w, 0.0);
    let coord = |dst: usize, n: usize| {
        let src = ((dst as f64 + 0.5) / f - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    for y in 0..h {
        let (y0, y1, fy) = coord(y, img.height);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, img.width);
            for c in 0..CHANNELS {
                let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
                let bot = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
                out.set(y, x, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}
