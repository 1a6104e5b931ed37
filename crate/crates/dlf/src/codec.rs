//! Image ↔ container.
//!
//! Encoding pads the image to whole 256×256 windows, runs the encoder,
//! quantizes both latents and serializes them. Decoding parses the payloads
//! back into the same [`QuantizedLatents`] and runs the shared synthesis
//! path, so a decoded container reproduces the in-memory reconstruction
//! exactly.

use candle_core::Tensor;
use dlf_core::{
    index_symbol, pack_indices, pad_to_multiple, quadtree_schedule, range_decode, range_encode, symbol_index,
    unpack_indices, BitContainer, CdfTable, Image, ImagePlane, GROUP_COUNT,
};

use crate::config::Variant;
use crate::entropy::DecodedContext;
use crate::error::{DlfError, Result};
use crate::network::{Model, PATCH, PIXEL_WINDOW, WINDOW};
use crate::nn::{images_to_tensor, tensor_to_image};
use crate::quant::{lookup, nearest_indices, sq_round_tensor, symbols_to_tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum DetailCode {
    /// Semantic-only ablation: no detail payload.
    Absent,
    /// Channels-last `h/2 × w/2 × C_d` scalar symbols.
    Symbols(Vec<i32>),
    /// One detail-codebook index per `h/2 × w/2` position.
    Indices(Vec<u32>),
}

/// Everything the decoder needs besides the model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLatents {
    pub orig_width: usize,
    pub orig_height: usize,
    /// Token grid of the padded image.
    pub grid_h: usize,
    pub grid_w: usize,
    pub kept_tokens: usize,
    /// `N × kept_tokens` semantic indices, window by window.
    pub semantic: Vec<u32>,
    pub detail: DetailCode,
}

impl QuantizedLatents {
    pub fn windows(&self) -> usize {
        (self.grid_h / WINDOW) * (self.grid_w / WINDOW)
    }
}

/// Pads to a whole number of semantic windows (at least one).
pub fn pad_image(img: &Image) -> Result<ImagePlane> {
    Ok(pad_to_multiple(img, PIXEL_WINDOW)?)
}

/// Semantic windows of an `orig_w × orig_h` image.
pub fn window_count(orig_w: usize, orig_h: usize) -> usize {
    orig_w.div_ceil(PIXEL_WINDOW) * orig_h.div_ceil(PIXEL_WINDOW)
}

impl Model {
    fn check_kept(&self, kept: usize) -> Result<()> {
        let t = self.cfg.tokens_per_window;
        if kept == 0 || kept > t {
            return Err(DlfError::InvalidInput(format!("token count {kept} outside 1..={t}")));
        }
        if kept < t && self.cfg.variant != Variant::NoDetail {
            return Err(DlfError::InvalidInput(format!(
                "token truncation is only defined for the no_detail variant, not {}",
                self.cfg.variant
            )));
        }
        Ok(())
    }

    /// Encoder and both quantizers, in evaluation mode.
    pub fn quantize(&self, img: &Image, kept_tokens: usize) -> Result<QuantizedLatents> {
        self.check_kept(kept_tokens)?;
        let plane = pad_image(img)?;
        let x = images_to_tensor(&[&plane.pixels], self.device())?;
        let lat = self.dual_encode(&self.patch_embed(&x)?)?;
        let (_, h2, w2, cd) = lat.y_d.dims4()?;
        let c = self.cfg.embed_dim;
        let y_s = lat.y_s.narrow(1, 0, kept_tokens)?;
        let tokens: Vec<f32> = y_s.flatten_all()?.to_vec1()?;
        let cb: Vec<f32> = self.codebook.t().flatten_all()?.to_vec1()?;
        let semantic = nearest_indices(&tokens, &cb, c)?;
        let detail = match self.cfg.variant {
            Variant::NoDetail => DetailCode::Absent,
            Variant::VqDetail => {
                let dcb = self.detail_codebook()?;
                let rows: Vec<f32> = lat.y_d.flatten_all()?.to_vec1()?;
                let cbv: Vec<f32> = dcb.flatten_all()?.to_vec1()?;
                DetailCode::Indices(nearest_indices(&rows, &cbv, cd)?)
            }
            Variant::Full | Variant::NoInteractive => DetailCode::Symbols(sq_round_tensor(&lat.y_d, &self.steps()?)?),
        };
        Ok(QuantizedLatents {
            orig_width: img.width(),
            orig_height: img.height(),
            grid_h: 2 * h2,
            grid_w: 2 * w2,
            kept_tokens,
            semantic,
            detail,
        })
    }

    pub(crate) fn detail_codebook(&self) -> Result<Tensor> {
        self.detail_codebook
            .as_ref()
            .map(|p| p.t())
            .ok_or_else(|| DlfError::InvalidInput("model has no detail codebook".into()))
    }

    /// Dequantized `(ŷ_s, ŷ_d)` tensors of one image.
    pub fn dequantize(&self, q: &QuantizedLatents) -> Result<(Tensor, Tensor)> {
        let c = self.cfg.embed_dim;
        let cd = self.cfg.detail_dim;
        let n = q.windows();
        if q.semantic.len() != n * q.kept_tokens {
            return Err(DlfError::Shape(format!(
                "{} semantic indices for {n} windows of {} tokens",
                q.semantic.len(),
                q.kept_tokens
            )));
        }
        let y_s = lookup(&q.semantic, &self.codebook.t())?.reshape((n, q.kept_tokens, c))?;
        let (h2, w2) = (q.grid_h / 2, q.grid_w / 2);
        let dev = self.device();
        let y_d = match &q.detail {
            DetailCode::Absent => Tensor::zeros((1, h2, w2, cd), candle_core::DType::F32, dev)?,
            DetailCode::Symbols(s) => {
                if s.len() != h2 * w2 * cd {
                    return Err(DlfError::Shape(format!("{} detail symbols for {h2}×{w2}×{cd}", s.len())));
                }
                symbols_to_tensor(s, &[1, h2, w2, cd], dev)?.broadcast_mul(&self.steps()?)?
            }
            DetailCode::Indices(idx) => {
                if idx.len() != h2 * w2 {
                    return Err(DlfError::Shape(format!("{} detail indices for {h2}×{w2}", idx.len())));
                }
                lookup(idx, &self.detail_codebook()?)?.reshape((1, h2, w2, cd))?
            }
        };
        Ok((y_s, y_d))
    }

    /// Fused feature `ĥ` of the padded grid, `(1, h, w, C)`.
    pub fn synthesize_latent(&self, q: &QuantizedLatents) -> Result<Tensor> {
        let (y_s, y_d) = self.dequantize(q)?;
        let (h_s, h_d) = self.dual_decode(&y_s, &y_d)?;
        self.fuse(&h_d, &h_s)
    }

    /// Reconstruction at the original size, clamped to `[0, 1]`.
    pub fn reconstruct(&self, q: &QuantizedLatents) -> Result<Image> {
        let h = self.synthesize_latent(q)?;
        let x = self.generate(&h, q.orig_height, q.orig_width)?;
        tensor_to_image(&x, 0)
    }

    /// The in-memory quantized forward pass.
    pub fn forward_quantized(&self, img: &Image, kept_tokens: usize) -> Result<Image> {
        self.reconstruct(&self.quantize(img, kept_tokens)?)
    }

    /// Per-position coding tables of one group, computed from `ctx`.
    fn group_tables(&self, ctx: &DecodedContext, k: usize) -> Result<Vec<CdfTable>> {
        self.entropy
            .predict_distribution(ctx, k, self.device())?
            .iter()
            .map(|d| Ok(d.cdf_table()?))
            .collect()
    }

    pub fn serialize(&self, q: &QuantizedLatents) -> Result<BitContainer> {
        let semantic = pack_indices(&q.semantic, self.cfg.codebook_size as u32)?;
        let detail = match &q.detail {
            DetailCode::Absent => Vec::new(),
            DetailCode::Indices(idx) => pack_indices(idx, self.cfg.detail_codebook_size() as u32)?,
            DetailCode::Symbols(symbols) => {
                let (h2, w2, cd) = (q.grid_h / 2, q.grid_w / 2, self.cfg.detail_dim);
                let sched = quadtree_schedule(h2, w2);
                let full = DecodedContext {
                    height: h2,
                    width: w2,
                    channels: cd,
                    symbols: symbols.clone(),
                    groups_filled: GROUP_COUNT,
                };
                let mut order = Vec::with_capacity(symbols.len());
                let mut tables = Vec::with_capacity(symbols.len());
                for k in 0..GROUP_COUNT {
                    for (c, y, x) in sched.group_positions(k, cd) {
                        order.push(symbol_index(symbols[full.index(c, y, x)]));
                    }
                    tables.extend(self.group_tables(&full, k)?);
                }
                range_encode(&order, |i, _| tables.get(i).cloned())?
            }
        };
        Ok(BitContainer {
            lambda_index: self.cfg.lambda_index,
            orig_width: q.orig_width as u32,
            orig_height: q.orig_height as u32,
            semantic,
            detail,
        })
    }

    pub fn parse(&self, c: &BitContainer) -> Result<QuantizedLatents> {
        if c.lambda_index != self.cfg.lambda_index {
            return Err(DlfError::CheckpointMismatch(format!(
                "container was coded at lambda index {}, checkpoint has {}",
                c.lambda_index, self.cfg.lambda_index
            )));
        }
        let (ow, oh) = (c.orig_width as usize, c.orig_height as usize);
        if ow == 0 || oh == 0 {
            return Err(DlfError::InvalidInput("container records an empty image".into()));
        }
        let n = window_count(ow, oh);
        let grid_w = ow.div_ceil(PIXEL_WINDOW) * WINDOW;
        let grid_h = oh.div_ceil(PIXEL_WINDOW) * WINDOW;
        let k = self.cfg.codebook_size as u32;
        // The kept token count is the one whose packed size matches.
        let kept_tokens = (1..=self.cfg.tokens_per_window)
            .rev()
            .find(|&t| dlf_core::packing::packed_len(n * t, k) == c.semantic.len())
            .ok_or(dlf_core::PackError::LengthMismatch {
                expected: dlf_core::packing::packed_len(n * self.cfg.tokens_per_window, k),
                actual: c.semantic.len(),
            })?;
        self.check_kept(kept_tokens)?;
        let semantic = unpack_indices(&c.semantic, k, n * kept_tokens)?;
        let (h2, w2, cd) = (grid_h / 2, grid_w / 2, self.cfg.detail_dim);
        let detail = match self.cfg.variant {
            Variant::NoDetail => {
                if !c.detail.is_empty() {
                    return Err(DlfError::CheckpointMismatch(
                        "container carries a detail payload but the checkpoint is semantic-only".into(),
                    ));
                }
                DetailCode::Absent
            }
            Variant::VqDetail => {
                DetailCode::Indices(unpack_indices(&c.detail, self.cfg.detail_codebook_size() as u32, h2 * w2)?)
            }
            Variant::Full | Variant::NoInteractive => {
                let sched = quadtree_schedule(h2, w2);
                let mut ctx = DecodedContext::empty(h2, w2, cd);
                let starts: Vec<usize> = (0..=GROUP_COUNT).map(|g| sched.group_start(g, cd)).collect();
                let mut tables: Vec<CdfTable> = Vec::new();
                let mut failure: Option<DlfError> = None;
                let decoded = range_decode(
                    &c.detail,
                    |i, prev| {
                        let g = (0..GROUP_COUNT).find(|&g| i >= starts[g] && i < starts[g + 1])?;
                        if i == starts[g] {
                            // Everything before this group is final: commit it.
                            for done in ctx.groups_filled..g {
                                let vals: Vec<i32> =
                                    prev[starts[done]..starts[done + 1]].iter().map(|&s| index_symbol(s)).collect();
                                if let Err(e) = ctx.fill_group(&sched, done, &vals) {
                                    failure = Some(e);
                                    return None;
                                }
                            }
                            match self.group_tables(&ctx, g) {
                                Ok(t) => tables = t,
                                Err(e) => {
                                    failure = Some(e);
                                    return None;
                                }
                            }
                        }
                        tables.get(i - starts[g]).cloned()
                    },
                    h2 * w2 * cd,
                );
                let decoded = match (decoded, failure) {
                    (_, Some(e)) => return Err(e),
                    (r, None) => r?,
                };
                let mut symbols = vec![0i32; h2 * w2 * cd];
                for (&s, (c, y, x)) in decoded.iter().zip(sched.coding_order(cd)) {
                    symbols[(y * w2 + x) * cd + c] = index_symbol(s);
                }
                DetailCode::Symbols(symbols)
            }
        };
        Ok(QuantizedLatents {
            orig_width: ow,
            orig_height: oh,
            grid_h,
            grid_w,
            kept_tokens,
            semantic,
            detail,
        })
    }

    pub fn encode_image(&self, img: &Image, kept_tokens: usize) -> Result<BitContainer> {
        self.serialize(&self.quantize(img, kept_tokens)?)
    }

    pub fn decode_container(&self, c: &BitContainer) -> Result<Image> {
        self.reconstruct(&self.parse(c)?)
    }

    /// Estimated detail bits of `q` under the entropy model, with the same
    /// floored distributions the coder uses.
    pub fn estimated_detail_bits(&self, q: &QuantizedLatents) -> Result<f64> {
        match &q.detail {
            DetailCode::Absent => Ok(0.0),
            DetailCode::Indices(idx) => {
                Ok((idx.len() as u64 * u64::from(dlf_core::bits_per_index(self.cfg.detail_codebook_size() as u32))) as f64)
            }
            DetailCode::Symbols(symbols) => {
                let (h2, w2, cd) = (q.grid_h / 2, q.grid_w / 2, self.cfg.detail_dim);
                let sched = quadtree_schedule(h2, w2);
                let full = DecodedContext {
                    height: h2,
                    width: w2,
                    channels: cd,
                    symbols: symbols.clone(),
                    groups_filled: GROUP_COUNT,
                };
                let mut bits = 0.0;
                for k in 0..GROUP_COUNT {
                    let dists = self.entropy.predict_distribution(&full, k, self.device())?;
                    let syms: Vec<i32> = sched
                        .group_positions(k, cd)
                        .map(|(c, y, x)| symbols[full.index(c, y, x)])
                        .collect();
                    bits += dlf_core::estimate_rate(&syms, &dists);
                }
                Ok(bits)
            }
        }
    }
}

/// Pixel count of the original image.
pub fn pixel_count(c: &BitContainer) -> usize {
    c.orig_width as usize * c.orig_height as usize
}

/// Token grid `(h, w)` of an image after window padding.
pub fn padded_grid(orig_w: usize, orig_h: usize) -> (usize, usize) {
    (
        orig_h.div_ceil(PIXEL_WINDOW) * PIXEL_WINDOW / PATCH,
        orig_w.div_ceil(PIXEL_WINDOW) * PIXEL_WINDOW / PATCH,
    )
}
