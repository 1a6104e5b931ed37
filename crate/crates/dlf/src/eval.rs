//! Rate-distortion evaluation from real containers.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dlf_core::{bd_rate, BitContainer, Image, Orientation, RdSample};

use crate::codec::pixel_count;
use crate::error::{DlfError, Result};
use crate::network::{Model, PATCH};
use crate::training::padded_batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    MsSsim,
    LatentMse,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::MsSsim, Metric::LatentMse];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr_db",
            Metric::MsSsim => "ms_ssim",
            Metric::LatentMse => "latent_mse",
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            Metric::LatentMse => Orientation::LowerIsBetter,
            _ => Orientation::HigherIsBetter,
        }
    }
}

/// Measurements of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub latent_mse: f64,
    /// Decoded container equals the in-memory reconstruction exactly.
    pub transparent: bool,
}

/// Mean measurements at one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub label: String,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub latent_mse: f64,
    pub images: usize,
    pub transparent: usize,
}

impl RdPoint {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Psnr => self.psnr,
            Metric::MsSsim => self.ms_ssim,
            Metric::LatentMse => self.latent_mse,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn samples(&self, m: Metric) -> Vec<RdSample> {
        self.points.iter().map(|p| RdSample::new(p.bpp, p.metric(m))).collect()
    }
}

/// Whole-container bits per pixel of the original image, header included.
pub fn compute_bpp(c: &BitContainer) -> f64 {
    (8 * c.byte_len()) as f64 / pixel_count(c) as f64
}

/// Encodes, serializes, parses and decodes `img`, then scores the result.
pub fn evaluate_image(model: &Model, img: &Image, kept_tokens: usize) -> Result<ImageResult> {
    let q = model.quantize(img, kept_tokens)?;
    let bytes = model.serialize(&q)?.to_bytes()?;
    let container = BitContainer::from_bytes(&bytes)?;
    let parsed = model.parse(&container)?;
    let h_hat = model.synthesize_latent(&parsed)?;
    let rec = crate::nn::tensor_to_image(&model.generate(&h_hat, img.height(), img.width())?, 0)?;
    let in_memory = model.reconstruct(&q)?;
    let xp = padded_batch(&[img], model.device())?;
    let (th, tw) = (img.height().div_ceil(PATCH), img.width().div_ceil(PATCH));
    let target = model.auxiliary_encode(&xp)?.narrow(1, 0, th)?.narrow(2, 0, tw)?;
    let latent_mse = (h_hat.narrow(1, 0, th)?.narrow(2, 0, tw)? - target)?
        .sqr()?
        .mean_all()?
        .to_scalar::<f32>()?;
    Ok(ImageResult {
        bpp: compute_bpp(&container),
        psnr: dlf_core::psnr(img, &rec)?,
        ms_ssim: dlf_core::ms_ssim(img, &rec)?,
        latent_mse: f64::from(latent_mse),
        transparent: parsed == q && rec == in_memory,
    })
}

/// Scores `images` on a pool of `workers` threads sharing `model`.
pub fn evaluate(model: &Model, images: &[Image], kept_tokens: usize, workers: usize) -> Result<Vec<ImageResult>> {
    if images.is_empty() {
        return Err(DlfError::EmptyDataset("no evaluation images".into()));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ImageResult>>>> = Mutex::new(images.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, images.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= images.len() {
                    break;
                }
                let r = evaluate_image(model, &images[i], kept_tokens);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers have finished")
        .into_iter()
        .map(|r| r.expect("every index is visited"))
        .collect()
}

pub fn mean_point(label: impl Into<String>, results: &[ImageResult]) -> RdPoint {
    let n = results.len().max(1) as f64;
    let mean = |f: fn(&ImageResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    RdPoint {
        label: label.into(),
        bpp: mean(|r| r.bpp),
        psnr: mean(|r| r.psnr),
        ms_ssim: mean(|r| r.ms_ssim),
        latent_mse: mean(|r| r.latent_mse),
        images: results.len(),
        transparent: results.iter().filter(|r| r.transparent).count(),
    }
}

pub fn points_csv(curves: &[RdCurve]) -> String {
    let mut s = String::from("curve,point,bpp,psnr_db,ms_ssim,latent_mse,images,transparent\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.label, p.label, p.bpp, p.psnr, p.ms_ssim, p.latent_mse, p.images, p.transparent
            );
        }
    }
    s
}

/// BD-rate of `test` against `anchor` in percent, per metric.
pub fn bd_rates(anchor: &RdCurve, test: &RdCurve) -> Vec<(Metric, Result<f64>)> {
    Metric::ALL
        .iter()
        .map(|&m| {
            let r = bd_rate(&anchor.samples(m), &test.samples(m), m.orientation()).map_err(DlfError::from);
            (m, r)
        })
        .collect()
}

/// Markdown report: one table per curve and a BD-rate table of every other
/// curve against `curves[0]`.
pub fn report_markdown(curves: &[RdCurve]) -> String {
    let mut s = String::from("# Rate-distortion report\n");
    for c in curves {
        let _ = writeln!(s, "\n## {}\n", c.label);
        s.push_str("| point | bpp | PSNR (dB) | MS-SSIM | latent MSE | transparent |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for p in &c.points {
            let _ = writeln!(
                s,
                "| {} | {:.5} | {:.3} | {:.4} | {:.5} | {}/{} |",
                p.label, p.bpp, p.psnr, p.ms_ssim, p.latent_mse, p.transparent, p.images
            );
        }
    }
    if let Some((anchor, rest)) = curves.split_first() {
        if !rest.is_empty() {
            let _ = writeln!(s, "\n## BD-rate vs {} (%; positive costs more bits)\n", anchor.label);
            s.push_str("| curve | psnr_db | ms_ssim | latent_mse |\n|---|---|---|---|\n");
            for c in rest {
                let cells: Vec<String> = bd_rates(anchor, c)
                    .into_iter()
                    .map(|(_, r)| match r {
                        Ok(v) => format!("{v:+.2}"),
                        Err(e) => format!("n/a ({e})"),
                    })
                    .collect();
                let _ = writeln!(s, "| {} | {} |", c.label, cells.join(" | "));
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(label: &str, pts: &[(f64, f64)]) -> RdCurve {
        RdCurve {
            label: label.into(),
            points: pts
                .iter()
                .enumerate()
                .map(|(i, &(bpp, q))| RdPoint {
                    label: format!("p{i}"),
                    bpp,
                    psnr: q,
                    ms_ssim: q / 40.0,
                    latent_mse: 1.0 / q,
                    images: 1,
                    transparent: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn halved_rate_is_minus_fifty_for_every_metric() {
        let a = curve("a", &[(0.1, 20.0), (0.2, 23.0), (0.4, 26.0), (0.8, 29.0)]);
        let b = curve("b", &[(0.05, 20.0), (0.1, 23.0), (0.2, 26.0), (0.4, 29.0)]);
        for (m, r) in bd_rates(&a, &b) {
            assert!((r.unwrap() + 50.0).abs() < 1e-9, "{}", m.name());
        }
        let md = report_markdown(&[a, b]);
        assert!(md.contains("| b | -50.00 | -50.00 | -50.00 |"), "{md}");
    }

    #[test]
    fn bpp_counts_the_header() {
        let c = BitContainer {
            lambda_index: 0,
            orig_width: 8,
            orig_height: 8,
            semantic: vec![0; 10],
            detail: vec![],
        };
        assert_eq!(compute_bpp(&c), (8 * (dlf_core::HEADER_LEN + 10)) as f64 / 64.0);
    }
}
