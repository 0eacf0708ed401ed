//! Full-reference image metrics and edit-distance text similarity.

use crate::codec::Image;
use crate::error::{contract, Result};

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        contract!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        );
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully-contained windows of the channel-mean luminance.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        contract!(
            "SSIM needs at least {}x{} pixels, got {}x{}",
            SSIM_WINDOW,
            SSIM_WINDOW,
            a.height(),
            a.width()
        );
    }
    let (ga, gb) = (a.gray(), b.gray());
    let w = a.width();
    let g = gaussian_window();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let (oh, ow) = (a.height() - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gy) in g.iter().enumerate() {
                for (j, gx) in g.iter().enumerate() {
                    let k = gy * gx;
                    let idx = (oy + i) * w + ox + j;
                    let (x, y) = (ga[idx], gb[idx]);
                    ma += k * x;
                    mb += k * y;
                    saa += k * x * x;
                    sbb += k * y * y;
                    sab += k * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Unit-cost insert/delete/substitute distance, two-row DP.
pub fn levenshtein<T: PartialEq>(p: &[T], g: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=g.len()).collect();
    let mut cur = vec![0; g.len() + 1];
    for (i, a) in p.iter().enumerate() {
        cur[0] = i + 1;
        for (j, b) in g.iter().enumerate() {
            let sub = prev[j] + usize::from(a != b);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[g.len()]
}

/// `1 - ED(p, g) / max(|p|, |g|)`, and 1 when both are empty.
pub fn ned<T: PartialEq>(p: &[T], g: &[T]) -> f64 {
    let m = p.len().max(g.len());
    if m == 0 {
        1.0
    } else {
        1.0 - levenshtein(p, g) as f64 / m as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn psnr_values() {
        let a = Image::filled(4, 4, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let p = psnr(&a, &Image::filled(4, 4, 0.0)).unwrap();
        assert!((p - 6.0206).abs() < 1e-4);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!(psnr(&a, &Image::filled(4, 5, 0.0)).is_err());
    }

    #[test]
    fn ssim_values() {
        let mut rng = Rng::new(5);
        let a = Image::new(16, 16, (0..768).map(|_| rng.uniform()).collect()).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = Image::filled(12, 12, 0.5);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let inv = Image::new(16, 16, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&a, &inv).unwrap();
        assert!((-1.0..0.5).contains(&s), "{s}");
        assert!(ssim(&Image::filled(8, 8, 0.0), &Image::filled(8, 8, 0.0)).is_err());
    }

    #[test]
    fn ned_values() {
        assert_eq!(ned(b"abc", b"abc"), 1.0);
        assert!((ned(b"abc", b"abd") - 0.6667).abs() < 1e-4);
        assert_eq!(ned(b"", b"abc"), 0.0);
        assert_eq!(ned::<u8>(b"", b""), 1.0);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    }
}
