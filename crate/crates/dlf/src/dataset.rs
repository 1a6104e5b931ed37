//! Training and evaluation images: a procedural toy set or crops from a
//! directory of PNG/PPM files, split deterministically.

use std::path::{Path, PathBuf};

use dlf_core::Image;
use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::config::DatasetSpec;
use crate::error::{DlfError, Result};
use crate::imageio::{read_image, write_image};
use crate::params::seeded_rng;

/// Environment variable naming a directory for cached crops.
pub const CACHE_ENV: &str = "DLF_CACHE_DIR";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Image>,
    pub val: Vec<Image>,
    pub test: Vec<Image>,
}

/// A smooth synthetic scene: a two-colour gradient under a few soft
/// Gaussian blobs and a faint low-frequency ripple.
pub fn toy_image(seed: u64, index: u64, size: usize) -> Image {
    let mut rng = seeded_rng(seed, 1 << 32 | index);
    let color = |rng: &mut rand_chacha::ChaCha8Rng| [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle = rng.random::<f32>() * std::f32::consts::TAU;
    let (dx, dy) = (angle.cos(), angle.sin());
    let blobs: Vec<([f32; 3], f32, f32, f32, f32)> = (0..rng.random_range(2..=4))
        .map(|_| {
            let s = size as f32;
            (
                color(&mut rng),
                rng.random::<f32>() * s,
                rng.random::<f32>() * s,
                s * (0.08 + 0.17 * rng.random::<f32>()),
                0.5 + 0.5 * rng.random::<f32>(),
            )
        })
        .collect();
    let freq = 2.0 + 4.0 * rng.random::<f32>();
    let phase = rng.random::<f32>() * std::f32::consts::TAU;
    let n = size * size;
    let mut data = vec![0f32; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f32 / size as f32, y as f32 / size as f32);
            let t = ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            let mut px = [0f32; 3];
            for c in 0..3 {
                px[c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
            for (col, bx, by, r, a) in &blobs {
                let d2 = ((x as f32 - bx).powi(2) + (y as f32 - by).powi(2)) / (2.0 * r * r);
                let w = a * (-d2).exp();
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - w) + col[c] * w;
                }
            }
            let ripple = 0.03 * (freq * std::f32::consts::TAU * (u * dy - v * dx) + phase).sin();
            for c in 0..3 {
                data[c * n + y * size + x] = (px[c] + ripple).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(size, size, data).expect("toy image has a valid shape")
}

/// `count` toy images starting at `first`.
pub fn toy_images(seed: u64, first: u64, count: usize, size: usize) -> Vec<Image> {
    (0..count as u64).map(|i| toy_image(seed, first + i, size)).collect()
}

impl Dataset {
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let images = match &spec.root {
            None => toy_images(spec.seed, 0, spec.max_images, spec.crop),
            Some(root) => load_directory(root, spec)?,
        };
        Self::split(images, spec)
    }

    fn split(mut images: Vec<Image>, spec: &DatasetSpec) -> Result<Self> {
        if images.is_empty() {
            return Err(DlfError::EmptyDataset("no usable images".into()));
        }
        images.shuffle(&mut seeded_rng(spec.seed, 2));
        let n = images.len();
        let n_train = ((n as f64 * spec.train_split).round() as usize).min(n);
        let n_val = ((n as f64 * spec.val_split).round() as usize).min(n - n_train);
        let test = images.split_off(n_train + n_val);
        let val = images.split_off(n_train);
        if images.is_empty() {
            return Err(DlfError::EmptyDataset("training split is empty".into()));
        }
        Ok(Self {
            train: images,
            val,
            test,
        })
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

/// One deterministic crop per file, in sorted path order. Files smaller than
/// the crop are skipped.
fn load_directory(root: &Path, spec: &DatasetSpec) -> Result<Vec<Image>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| DlfError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let mut out = Vec::new();
    for (i, path) in files.iter().enumerate() {
        if out.len() == spec.max_images {
            break;
        }
        if let Some(img) = cached_crop(path, i as u64, spec, cache.as_deref())? {
            out.push(img);
        }
    }
    if out.is_empty() {
        return Err(DlfError::EmptyDataset(format!(
            "{} holds no PNG/PPM image of at least {c}×{c} pixels",
            root.display(),
            c = spec.crop
        )));
    }
    Ok(out)
}

fn cached_crop(path: &Path, index: u64, spec: &DatasetSpec, cache: Option<&Path>) -> Result<Option<Image>> {
    let key = cache.map(|dir| {
        let meta = std::fs::metadata(path).ok();
        let mut h = Sha256::new();
        h.update(path.to_string_lossy().as_bytes());
        h.update(meta.as_ref().map_or(0, |m| m.len()).to_le_bytes());
        h.update(
            meta.and_then(|m| m.modified().ok())
                .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
                .map_or(0, |d| d.as_nanos())
                .to_le_bytes(),
        );
        h.update(spec.crop.to_le_bytes());
        h.update(spec.seed.to_le_bytes());
        let hex: String = h.finalize()[..12].iter().map(|b| format!("{b:02x}")).collect();
        dir.join(format!("{hex}.ppm"))
    });
    if let Some(k) = &key {
        if k.is_file() {
            if let Ok(img) = read_image(k) {
                return Ok(Some(img));
            }
        }
    }
    let img = read_image(path)?;
    let c = spec.crop;
    if img.width() < c || img.height() < c {
        return Ok(None);
    }
    let mut rng = seeded_rng(spec.seed, 3 << 32 | index);
    let x0 = rng.random_range(0..=img.width() - c);
    let y0 = rng.random_range(0..=img.height() - c);
    let crop = img.crop_at(x0, y0, c, c)?;
    if let Some(k) = key {
        write_image(&k, &crop)?;
    }
    Ok(Some(crop))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toys_are_deterministic_and_in_range() {
        let a = toy_image(5, 7, 32);
        assert_eq!(a, toy_image(5, 7, 32));
        assert_ne!(a, toy_image(5, 8, 32));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn toy_split_sizes() {
        let spec = DatasetSpec {
            max_images: 20,
            crop: 16,
            ..Default::default()
        };
        let d = Dataset::load(&spec).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (16, 2, 2));
    }

    #[test]
    fn directory_without_images_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("notes.txt"), "hi").unwrap();
        let spec = DatasetSpec {
            root: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let err = Dataset::load(&spec).unwrap_err();
        assert!(matches!(err, DlfError::EmptyDataset(_)));
        assert_eq!(err.exit_code(), 2);
    }
}
