//! Planar RGB images with values in `[0, 1]`.

use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImageError {
    #[error("image must be at least 1×1, got {width}×{height}")]
    Empty { width: usize, height: usize },
    #[error("expected {expected} samples for a 3×{height}×{width} image, got {actual}")]
    SampleCount {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("padding multiple must be positive")]
    ZeroMultiple,
    #[error("shape mismatch: {0}×{1} vs {2}×{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// A `3 × height × width` image stored plane by plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty { width, height });
        }
        let expected = 3 * width * height;
        if data.len() != expected {
            return Err(ImageError::SampleCount {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self, ImageError> {
        Self::new(width, height, alloc::vec![value; 3 * width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Top-left `width × height` window.
    pub fn crop(&self, width: usize, height: usize) -> Result<Self, ImageError> {
        self.crop_at(0, 0, width, height)
    }

    pub fn crop_at(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty { width, height });
        }
        if x0 + width > self.width || y0 + height > self.height {
            return Err(ImageError::ShapeMismatch(width, height, self.width, self.height));
        }
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in y0..y0 + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn clamped(mut self) -> Self {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }
}

/// An image padded to a multiple of some block size, remembering its
/// original extent.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pub pixels: Image,
    pub orig_width: usize,
    pub orig_height: usize,
}

impl ImagePlane {
    pub fn width(&self) -> usize {
        self.pixels.width
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn crop_to_original(&self) -> Image {
        // Original extent never exceeds the padded one.
        self.pixels
            .crop(self.orig_width, self.orig_height)
            .unwrap_or_else(|_| self.pixels.clone())
    }
}

/// Replication-pads `image` on the right and bottom to the smallest multiple
/// of `multiple` in each dimension.
pub fn pad_to_multiple(image: &Image, multiple: usize) -> Result<ImagePlane, ImageError> {
    if multiple == 0 {
        return Err(ImageError::ZeroMultiple);
    }
    let (w0, h0) = (image.width, image.height);
    let width = w0.div_ceil(multiple) * multiple;
    let height = h0.div_ceil(multiple) * multiple;
    let mut data = Vec::with_capacity(3 * width * height);
    for c in 0..3 {
        for y in 0..height {
            let row = &image.data[(c * h0 + y.min(h0 - 1)) * w0..][..w0];
            data.extend_from_slice(row);
            let last = row[w0 - 1];
            data.extend(core::iter::repeat_n(last, width - w0));
        }
    }
    Ok(ImagePlane {
        pixels: Image { width, height, data },
        orig_width: w0,
        orig_height: h0,
    })
}
