//! Pixel-domain distortion metrics.

use alloc::vec::Vec;

use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}×{1} vs {2}×{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image of {0}×{1} is smaller than the {WINDOW}×{WINDOW} SSIM window")]
    TooSmall(usize, usize),
}

fn check_shapes(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MetricError::ShapeMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / MSE)` for unit-range images, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(1.0 / m)).min(PSNR_CAP_DB))
}

fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = libm::exp(-d * d / (2.0 * SIGMA * SIGMA));
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Valid-mode separable Gaussian filter of a `w × h` plane.
fn filter(plane: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut rows = alloc::vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = alloc::vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_cs(a: &[f64], b: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> (f64, f64) {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu_a, ow, oh) = filter(a, w, h, taps);
    let (mu_b, ..) = filter(b, w, h, taps);
    let (s_aa, ..) = filter(&aa, w, h, taps);
    let (s_bb, ..) = filter(&bb, w, h, taps);
    let (s_ab, ..) = filter(&ab, w, h, taps);
    let n = (ow * oh) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = s_aa[i] - ma * ma;
        let vb = s_bb[i] - mb * mb;
        let cov = s_ab[i] - ma * mb;
        let cs_i = (2.0 * cov + c2) / (va + vb + c2);
        cs += cs_i;
        ssim += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs_i;
    }
    (ssim / n, cs / n)
}

/// 2×2 mean pooling; a trailing odd row or column averages the samples it has.
fn halve(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let nw = w.div_ceil(2);
    let nh = h.div_ceil(2);
    let mut out = alloc::vec![0.0; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            let mut s = 0.0;
            let mut n = 0.0;
            for yy in 2 * y..(2 * y + 2).min(h) {
                for xx in 2 * x..(2 * x + 2).min(w) {
                    s += plane[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * nw + x] = s / n;
        }
    }
    (out, nw, nh)
}

/// Number of dyadic scales whose smaller side still fits the SSIM window.
pub fn ms_ssim_scales(width: usize, height: usize) -> usize {
    let mut side = width.min(height);
    let mut levels = 0;
    while levels < MS_SSIM_WEIGHTS.len() && side >= WINDOW {
        levels += 1;
        side = side.div_ceil(2);
    }
    levels
}

/// Multi-scale SSIM with the standard five weights, averaged over the three
/// colour planes.
///
/// Images need a smaller side of at least 161 pixels for all five scales.
/// Smaller images use as many scales as fit and renormalize the leading
/// weights to sum to one; below 11 pixels an error is returned. Negative
/// per-scale terms are clamped to zero before exponentiation.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let levels = ms_ssim_scales(a.width(), a.height());
    if levels == 0 {
        return Err(MetricError::TooSmall(a.width(), a.height()));
    }
    let weights = &MS_SSIM_WEIGHTS[..levels];
    let wsum: f64 = weights.iter().sum();
    let taps = gaussian_taps();
    let mut total = 0.0;
    for c in 0..3 {
        let mut pa: Vec<f64> = a.plane(c).iter().map(|&v| f64::from(v)).collect();
        let mut pb: Vec<f64> = b.plane(c).iter().map(|&v| f64::from(v)).collect();
        let (mut w, mut h) = (a.width(), a.height());
        let mut score = 1.0;
        for (j, &wj) in weights.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&pa, &pb, w, h, &taps);
            let term = if j + 1 == levels { ssim } else { cs };
            score *= libm::pow(term.max(0.0), wj / wsum);
            if j + 1 < levels {
                let (na, nw, nh) = halve(&pa, w, h);
                let (nb, ..) = halve(&pb, w, h);
                pa = na;
                pb = nb;
                w = nw;
                h = nh;
            }
        }
        total += score;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f32, w: usize, h: usize) -> Image {
        Image::filled(w, h, v).unwrap()
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = flat(0.3, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_zeros_vs_ones() {
        assert_eq!(psnr(&flat(0.0, 4, 4), &flat(1.0, 4, 4)).unwrap(), 0.0);
    }

    #[test]
    fn psnr_uniform_offset() {
        let a = flat(0.25, 16, 16);
        let b = flat(0.35, 16, 16);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn scale_count() {
        assert_eq!(ms_ssim_scales(161, 400), 5);
        assert_eq!(ms_ssim_scales(160, 160), 4);
        assert_eq!(ms_ssim_scales(64, 64), 3);
        assert_eq!(ms_ssim_scales(11, 11), 1);
        assert_eq!(ms_ssim_scales(10, 64), 0);
    }

    #[test]
    fn ms_ssim_identity_and_errors() {
        let data = (0..3 * 40 * 30).map(|i| ((i * 31) % 101) as f32 / 100.0).collect();
        let a = Image::new(40, 30, data).unwrap();
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ms_ssim(&flat(0.0, 10, 10), &flat(0.0, 10, 10)), Err(MetricError::TooSmall(10, 10)));
        assert!(matches!(ms_ssim(&a, &flat(0.0, 30, 40)), Err(MetricError::ShapeMismatch(..))));
    }
}
