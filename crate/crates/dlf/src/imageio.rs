//! PNG / PPM reading and atomic file writes.

use std::io::Write;
use std::path::Path;

use dlf_core::Image;

use crate::error::{DlfError, Result};

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| DlfError::io(path, e))?;
    decode_image(&bytes).map_err(|e| DlfError::InvalidInput(format!("{}: {e}", path.display())))
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let format = image::guess_format(bytes).map_err(|e| DlfError::InvalidInput(e.to_string()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Pnm) {
        return Err(DlfError::InvalidInput(format!("unsupported image format {format:?}")));
    }
    let rgb = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| DlfError::InvalidInput(e.to_string()))?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(Image::new(w, h, data)?)
}

pub fn to_rgb8(img: &Image) -> image::RgbImage {
    let (w, h) = (img.width(), img.height());
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (img.data()[c * w * h + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

/// Encodes as PPM when the extension is `ppm`, PNG otherwise.
pub fn encode_image(img: &Image, path: &Path) -> Result<Vec<u8>> {
    let rgb = to_rgb8(img);
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => image::ImageFormat::Pnm,
        _ => image::ImageFormat::Png,
    };
    let mut out = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut out, format)
        .map_err(|e| DlfError::InvalidInput(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_image(img, path)?)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| DlfError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| DlfError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| DlfError::io(path, e))?;
    tmp.persist(path).map_err(|e| DlfError::io(path, e.error))?;
    Ok(())
}
