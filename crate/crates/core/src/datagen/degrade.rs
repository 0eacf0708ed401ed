//! Blur, downsample, noise and quantize.

use serde::{Deserialize, Serialize};

use crate::codec::{Image, CHANNELS};
use crate::error::{contract, Result};
use crate::numerics::Rng;

pub const FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownKernel {
    /// Pixel `4i + 2` of each block.
    Nearest,
    /// Mean of the two centre pixels per axis.
    Bilinear,
    /// Block mean.
    Area,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub blur_sigma: (f64, f64),
    pub factor: usize,
    pub kernels: Vec<DownKernel>,
    pub noise_sigma: (f64, f64),
    pub quant_levels: (u32, u32),
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma: (0.3, 1.2),
            factor: FACTOR,
            kernels: vec![DownKernel::Nearest, DownKernel::Bilinear, DownKernel::Area],
            noise_sigma: (0.0, 0.03),
            quant_levels: (32, 128),
        }
    }
}

impl DegradationConfig {
    /// Settings under which degradation reduces to nearest subsampling.
    pub fn identity() -> Self {
        Self {
            blur_sigma: (0.0, 0.0),
            factor: FACTOR,
            kernels: vec![DownKernel::Nearest],
            noise_sigma: (0.0, 0.0),
            quant_levels: (256, 256),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64)| -> Result<()> {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                contract!("{} range ({}, {}) must be non-empty and non-negative", name, lo, hi);
            }
            Ok(())
        };
        range("blur sigma", self.blur_sigma)?;
        range("noise sigma", self.noise_sigma)?;
        if self.factor != FACTOR {
            contract!("downsample factor is fixed at {}, got {}", FACTOR, self.factor);
        }
        if self.kernels.is_empty() {
            contract!("kernel set is empty");
        }
        let (lo, hi) = self.quant_levels;
        if lo < 2 || hi < lo || hi > 256 {
            contract!("quantization levels ({}, {}) must satisfy 2 <= lo <= hi <= 256", lo, hi);
        }
        Ok(())
    }
}

/// Parameters drawn for one item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationDraw {
    pub blur_sigma: f64,
    pub kernel: DownKernel,
    pub noise_sigma: f64,
    pub levels: u32,
}

fn draw(cfg: &DegradationConfig, rng: &mut Rng) -> DegradationDraw {
    DegradationDraw {
        blur_sigma: rng.uniform_in(cfg.blur_sigma.0, cfg.blur_sigma.1),
        kernel: cfg.kernels[rng.below(cfg.kernels.len())],
        noise_sigma: rng.uniform_in(cfg.noise_sigma.0, cfg.noise_sigma.1),
        levels: cfg.quant_levels.0 + rng.below((cfg.quant_levels.1 - cfg.quant_levels.0 + 1) as usize) as u32,
    }
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= norm);
    let (h, w) = (img.height() as isize, img.width() as isize);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::filled(h as usize, w as usize, 0.0);
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let d = j as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x + d).clamp(0, w - 1))
                        } else {
                            ((y + d).clamp(0, h - 1), x)
                        };
                        acc += kv * src.get(yy as usize, xx as usize, c);
                    }
                    out.set(y as usize, x as usize, c, acc);
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn downsample(img: &Image, kernel: DownKernel) -> Image {
    let (h, w) = (img.height() / FACTOR, img.width() / FACTOR);
    let mut out = Image::filled(h, w, 0.0);
    let taps: &[usize] = match kernel {
        DownKernel::Nearest => &[2],
        DownKernel::Bilinear => &[1, 2],
        DownKernel::Area => &[0, 1, 2, 3],
    };
    let n = (taps.len() * taps.len()) as f64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for &dy in taps {
                    for &dx in taps {
                        acc += img.get(FACTOR * y + dy, FACTOR * x + dx, c);
                    }
                }
                out.set(y, x, c, acc / n);
            }
        }
    }
    out
}

/// Synthesizes the low-quality counterpart at quarter resolution.
pub fn degrade(img: &Image, cfg: &DegradationConfig, seed: u64) -> Result<Image> {
    Ok(degrade_with_draw(img, cfg, seed)?.0)
}

/// As [`degrade`], also returning the sampled parameters.
pub fn degrade_with_draw(img: &Image, cfg: &DegradationConfig, seed: u64) -> Result<(Image, DegradationDraw)> {
    cfg.validate()?;
    if img.height() % FACTOR != 0 || img.width() % FACTOR != 0 {
        contract!(
            "image {}x{} not divisible by {}",
            img.height(),
            img.width(),
            FACTOR
        );
    }
    let root = Rng::new(seed);
    let d = draw(cfg, &mut root.split(0));
    let mut out = downsample(&gaussian_blur(img, d.blur_sigma), d.kernel);
    if d.noise_sigma > 0.0 {
        let mut noise = root.split(1);
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v += d.noise_sigma * noise.normal());
    }
    let q = (d.levels - 1) as f64;
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = (v.clamp(0.0, 1.0) * q).round() / q);
    Ok((out.quantized_8bit(), d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::scene::{render_scene, SceneConfig};

    #[test]
    fn quarter_resolution() {
        let s = render_scene(1, &SceneConfig::default()).unwrap();
        let lq = degrade(&s.image, &DegradationConfig::default(), 9).unwrap();
        assert_eq!((lq.height(), lq.width()), (8, 8));
        assert!(degrade(&Image::filled(30, 32, 0.5), &DegradationConfig::default(), 0).is_err());
    }

    #[test]
    fn identity_settings_subsample() {
        let s = render_scene(2, &SceneConfig::default()).unwrap();
        let lq = degrade(&s.image, &DegradationConfig::identity(), 5).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    assert_eq!(lq.get(y, x, c), s.image.get(4 * y + 2, 4 * x + 2, c));
                }
            }
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(8, 8, 0.4);
        let b = gaussian_blur(&img, 1.3);
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn rejects_invalid_ranges() {
        let mut cfg = DegradationConfig::default();
        cfg.noise_sigma = (0.1, 0.0);
        assert!(cfg.validate().is_err());
        cfg = DegradationConfig::default();
        cfg.quant_levels = (1, 4);
        assert!(cfg.validate().is_err());
        cfg = DegradationConfig::default();
        cfg.kernels.clear();
        assert!(cfg.validate().is_err());
    }
}
