//! The dual-branch transform.
//!
//! Pixels are embedded into a `C × H/16 × W/16` token grid. The semantic
//! branch attends within 16×16-token windows, each extended by learned
//! one-dimensional tokens that become the quantized semantic latent. The
//! detail branch runs shifted-window attention and depthwise convolutions
//! over the whole grid and is downsampled ×2 into the detail latent.
//! Interactive transforms join the two per window. The decoder mirrors this,
//! an adaptor fuses both outputs and a generator upsamples ×16 to pixels.

use std::sync::atomic::{AtomicBool, Ordering};

use candle_core::{Device, Tensor};

use crate::config::{ModelConfig, Variant};
use crate::entropy::EntropyModel;
use crate::error::{DlfError, Result};
use crate::nn::{
    depth_to_space, patchify, space_to_depth, window_partition, window_reverse, Attention, ConvNeXtBlock, LayerNorm,
    Linear, ResConv, SwinBlock, TransformerBlock,
};
use crate::params::{seeded_rng, Checkpoint, Manifest, Param, ParamBuilder, ParamGroup, ParamStore};

/// Pixels per token side.
pub const PATCH: usize = 16;
/// Tokens per semantic window side.
pub const WINDOW: usize = 16;
/// Grid tokens per semantic window.
pub const WINDOW_TOKENS: usize = WINDOW * WINDOW;
/// Pixels per semantic window side.
pub const PIXEL_WINDOW: usize = PATCH * WINDOW;

/// Joint self-attention over the semantic and detail tokens of each window,
/// added residually through a zero-initialized projection.
pub struct InteractiveTransform {
    norm: LayerNorm,
    attn: Attention,
}

impl InteractiveTransform {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut pb = pb.pp(name);
        Ok(Self {
            norm: LayerNorm::new(&mut pb, "norm", dim)?,
            attn: Attention::new(&mut pb, "attn", dim, heads, true)?,
        })
    }

    /// `f_s`: `(B·N, L_s, C)`; `f_d`: `(B, h, w, C)` with `N = h·w / 256`.
    pub fn forward(&self, f_s: &Tensor, f_d: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, h, w, _) = f_d.dims4()?;
        if h % WINDOW != 0 || w % WINDOW != 0 {
            return Err(DlfError::Shape(format!("detail grid {h}×{w} is not a whole number of windows")));
        }
        let fd = window_partition(f_d, WINDOW)?;
        let (n_s, l_s, _) = f_s.dims3()?;
        if fd.dim(0)? != n_s {
            return Err(DlfError::Shape(format!(
                "{} detail windows against {n_s} semantic windows",
                fd.dim(0)?
            )));
        }
        let x = Tensor::cat(&[f_s, &fd], 1)?;
        let x = (&x + self.attn.forward(&self.norm.forward(&x)?, None)?)?;
        let s = x.narrow(1, 0, l_s)?;
        let d = window_reverse(&x.narrow(1, l_s, WINDOW_TOKENS)?.contiguous()?, WINDOW, b, h, w)?;
        Ok((s, d))
    }
}

struct DetailBlock {
    swin: SwinBlock,
    conv: ConvNeXtBlock,
}

impl DetailBlock {
    fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig, shifted: bool) -> Result<Self> {
        let mut pb = pb.pp(name);
        let c = cfg.embed_dim;
        Ok(Self {
            swin: SwinBlock::new(&mut pb, "swin", c, cfg.heads, cfg.mlp_ratio, cfg.detail_window, shifted)?,
            conv: ConvNeXtBlock::new(&mut pb, "convnext", c, cfg.dw_kernel, cfg.mlp_ratio)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&self.swin.forward(x)?)
    }
}

struct Stage {
    sem: TransformerBlock,
    det: DetailBlock,
    it: Option<InteractiveTransform>,
}

impl Stage {
    fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig, index: usize) -> Result<Self> {
        let c = cfg.embed_dim;
        let sem = TransformerBlock::new(&mut pb.group(ParamGroup::Semantic).pp(name), "sem", c, cfg.heads, cfg.mlp_ratio)?;
        let det = DetailBlock::new(&mut pb.group(ParamGroup::Detail).pp(name), "det", cfg, index % 2 == 1)?;
        let it = if cfg.variant == Variant::NoInteractive {
            None
        } else {
            Some(InteractiveTransform::new(
                &mut pb.group(ParamGroup::Interactive).pp(name),
                "it",
                c,
                cfg.heads,
            )?)
        };
        Ok(Self { sem, det, it })
    }

    fn forward(&self, sem: &Tensor, det: &Tensor, interactive: bool) -> Result<(Tensor, Tensor)> {
        let sem = self.sem.forward(sem, None)?;
        let det = self.det.forward(det)?;
        match (&self.it, interactive) {
            (Some(it), true) => it.forward(&sem, &det),
            _ => Ok((sem, det)),
        }
    }
}

/// `ĥ = f_ada(h_d, h_s)`: concatenation, projection, two residual conv
/// blocks and an output projection.
pub struct Adaptor {
    inp: Linear,
    blocks: Vec<ResConv>,
    out: Linear,
}

impl Adaptor {
    fn new(pb: &mut ParamBuilder, c: usize) -> Result<Self> {
        let mut pb = pb.pp("adaptor");
        Ok(Self {
            inp: Linear::new(&mut pb, "in", 2 * c, c)?,
            blocks: vec![ResConv::new(&mut pb, "block0", c)?, ResConv::new(&mut pb, "block1", c)?],
            out: Linear::new(&mut pb, "out", c, c)?,
        })
    }

    pub fn forward(&self, h_d: &Tensor, h_s: &Tensor) -> Result<Tensor> {
        if h_d.dims() != h_s.dims() {
            return Err(DlfError::Shape(format!(
                "fuse needs equal shapes, got {:?} and {:?}",
                h_d.dims(),
                h_s.dims()
            )));
        }
        let mut x = self.inp.forward(&Tensor::cat(&[h_d, h_s], 3)?)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        self.out.forward(&x)
    }
}

/// Pixel generator: four ×2 stages of projection, depth-to-space and a
/// residual conv block.
pub struct Generator {
    inp: Linear,
    ups: Vec<(Linear, ResConv)>,
    out: Linear,
}

impl Generator {
    fn new(pb: &mut ParamBuilder, c: usize, widths: &[usize]) -> Result<Self> {
        let mut pb = pb.pp("generator");
        let inp = Linear::new(&mut pb, "in", c, widths[0])?;
        let mut ups = Vec::new();
        let mut prev = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let mut pb = pb.pp(format!("up{i}"));
            ups.push((Linear::new(&mut pb, "expand", prev, 4 * w)?, ResConv::new(&mut pb, "block", w)?));
            prev = w;
        }
        let out = Linear::with_bias(&mut pb, "out", prev, 3, 0.5)?;
        Ok(Self { inp, ups, out })
    }

    /// `(B, h, w, C)` → `(B, 16h, 16w, 3)`, unclamped.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let mut x = self.inp.forward(h)?;
        for (expand, block) in &self.ups {
            x = block.forward(&depth_to_space(&expand.forward(&x.gelu()?)?)?)?;
        }
        self.out.forward(&x.gelu()?)
    }
}

/// Frozen target encoder: patch projection, two residual conv blocks and a
/// parameter-free layer norm.
pub struct AuxEncoder {
    embed: Linear,
    blocks: Vec<ResConv>,
    out: Linear,
    norm: LayerNorm,
}

impl AuxEncoder {
    fn new(pb: &mut ParamBuilder, c: usize) -> Result<Self> {
        let mut pb = pb.pp("aux");
        Ok(Self {
            embed: Linear::new(&mut pb, "embed", PATCH * PATCH * 3, c)?,
            blocks: vec![ResConv::new(&mut pb, "block0", c)?, ResConv::new(&mut pb, "block1", c)?],
            out: Linear::new(&mut pb, "out", c, c)?,
            norm: LayerNorm::plain(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.embed.forward(&patchify(x, PATCH)?)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.norm.forward(&self.out.forward(&h)?)
    }
}

/// Encoder output before quantization.
pub struct Latents {
    /// `(B·N, T, C)` one-dimensional tokens.
    pub y_s: Tensor,
    /// `(B, h/2, w/2, C_d)`.
    pub y_d: Tensor,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    patch_embed: Linear,
    sem_pos: Param,
    latent_tokens: Param,
    enc: Vec<Stage>,
    sem_out_norm: LayerNorm,
    sem_out: Linear,
    det_down: Linear,
    pub codebook: Param,
    log_steps: Param,
    pub detail_codebook: Option<Param>,
    dec_in: Linear,
    placeholders: Param,
    dec_latent_pos: Param,
    mask_token: Param,
    det_up: Linear,
    dec: Vec<Stage>,
    hs_norm: LayerNorm,
    hd_norm: LayerNorm,
    pub adaptor: Adaptor,
    pub generator: Generator,
    pub aux: AuxEncoder,
    pub entropy: EntropyModel,
    interactive: AtomicBool,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let mut store = ParamStore::new(device);
        let mut rng = seeded_rng(seed, 0);
        let c = cfg.embed_dim;
        let cd = cfg.detail_dim;
        let t = cfg.tokens_per_window;
        let mut root = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Semantic);

        let mut sem = root.group(ParamGroup::Semantic);
        let patch_embed = Linear::new(&mut sem, "patch_embed", PATCH * PATCH * 3, c)?;
        let sem_pos = sem.normal("semantic.pos", &[WINDOW_TOKENS, c], 0.02)?;
        let latent_tokens = sem.normal("semantic.latent_tokens", &[t, c], 1.0)?;
        drop(sem);

        let enc = (0..cfg.stages)
            .map(|i| Stage::new(&mut root.pp("enc"), &format!("{i}"), &cfg, i))
            .collect::<Result<Vec<_>>>()?;

        let mut sem = root.group(ParamGroup::Semantic);
        let sem_out_norm = LayerNorm::new(&mut sem, "semantic.out_norm", c)?;
        let sem_out = Linear::new(&mut sem, "semantic.out", c, c)?;
        let codebook = sem.normal("semantic.codebook", &[cfg.codebook_size, c], 1.0)?;
        let dec_in = Linear::new(&mut sem, "semantic.dec_in", c, c)?;
        let placeholders = sem.normal("semantic.placeholders", &[WINDOW_TOKENS, c], 1.0)?;
        let dec_latent_pos = sem.normal("semantic.dec_pos", &[t, c], 0.02)?;
        let mask_token = sem.normal("semantic.mask_token", &[c], 1.0)?;
        let hs_norm = LayerNorm::new(&mut sem, "semantic.hs_norm", c)?;
        drop(sem);

        let mut det = root.group(ParamGroup::Detail);
        let det_down = Linear::new(&mut det, "detail.down", 4 * c, cd)?;
        let log_steps = det.zeros("detail.log_steps", &[cd])?;
        let detail_codebook = if cfg.variant == Variant::VqDetail {
            Some(det.normal("detail.codebook", &[cfg.detail_codebook_size(), cd], 1.0)?)
        } else {
            None
        };
        let det_up = Linear::new(&mut det, "detail.up", cd, 4 * c)?;
        let hd_norm = LayerNorm::new(&mut det, "detail.hd_norm", c)?;
        drop(det);

        let dec = (0..cfg.stages)
            .map(|i| Stage::new(&mut root.pp("dec"), &format!("{i}"), &cfg, i))
            .collect::<Result<Vec<_>>>()?;

        let adaptor = Adaptor::new(&mut root.group(ParamGroup::Adaptor), c)?;
        let generator = Generator::new(&mut root.group(ParamGroup::Generator), c, &cfg.gen_channels)?;
        let aux = AuxEncoder::new(&mut root.group(ParamGroup::Auxiliary), c)?;
        let entropy = EntropyModel::new(&mut root.group(ParamGroup::Entropy), cd, cfg.entropy_hidden)?;
        drop(root);

        Ok(Self {
            cfg,
            store,
            patch_embed,
            sem_pos,
            latent_tokens,
            enc,
            sem_out_norm,
            sem_out,
            det_down,
            codebook,
            log_steps,
            detail_codebook,
            dec_in,
            placeholders,
            dec_latent_pos,
            mask_token,
            det_up,
            dec,
            hs_norm,
            hd_norm,
            adaptor,
            generator,
            aux,
            entropy,
            interactive: AtomicBool::new(true),
        })
    }

    /// Rebuilds the model recorded in a checkpoint and loads its weights.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut cfg = ModelConfig::parse(&ckpt.manifest.model_config)?;
        cfg.lambda_index = ckpt.manifest.lambda_index;
        if cfg.hash() != ckpt.manifest.config_hash {
            return Err(DlfError::CheckpointMismatch("model config does not match its hash".into()));
        }
        let model = Self::new(cfg, 0)?;
        model.store.load_from(ckpt)?;
        Ok(model)
    }

    pub fn manifest(&self, stage: u8, step: u64) -> Manifest {
        Manifest {
            config_hash: self.cfg.hash(),
            stage,
            lambda_index: self.cfg.lambda_index,
            codebook_size: self.cfg.codebook_size as u32,
            variant: self.cfg.variant.name().to_string(),
            step,
            model_config: self.cfg.to_kv(),
        }
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Turns every interactive transform on or off (they are still applied
    /// only if the variant has them).
    pub fn set_interactive(&self, on: bool) {
        self.interactive.store(on, Ordering::Relaxed);
    }

    fn interactive(&self) -> bool {
        self.interactive.load(Ordering::Relaxed)
    }

    /// Quantization steps `exp(s)`, shape `(C_d,)`.
    pub fn steps(&self) -> Result<Tensor> {
        Ok(self.log_steps.t().exp()?)
    }

    /// `(B, H, W, 3)` → `(B, H/16, W/16, C)`.
    pub fn patch_embed(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = x.dims4()?;
        if c != 3 || h % PATCH != 0 || w % PATCH != 0 {
            return Err(DlfError::Shape(format!("pixels {h}×{w}×{c} are not padded to 16")));
        }
        self.patch_embed.forward(&patchify(x, PATCH)?)
    }

    pub fn dual_encode(&self, emb: &Tensor) -> Result<Latents> {
        let (b, h, w, c) = emb.dims4()?;
        if h % WINDOW != 0 || w % WINDOW != 0 || h == 0 || w == 0 {
            return Err(DlfError::Shape(format!("grid {h}×{w} is not a whole number of 16×16 windows")));
        }
        let n = b * (h / WINDOW) * (w / WINDOW);
        let t = self.cfg.tokens_per_window;
        let grid = window_partition(emb, WINDOW)?.broadcast_add(&self.sem_pos.t())?;
        let lat = self.latent_tokens.t().unsqueeze(0)?.broadcast_as((n, t, c))?;
        let mut sem = Tensor::cat(&[&grid, &lat], 1)?;
        let mut det = emb.clone();
        for stage in &self.enc {
            (sem, det) = stage.forward(&sem, &det, self.interactive())?;
        }
        let y_s = self
            .sem_out
            .forward(&self.sem_out_norm.forward(&sem.narrow(1, WINDOW_TOKENS, t)?)?)?;
        let y_d = self.det_down.forward(&space_to_depth(&det)?)?;
        Ok(Latents { y_s, y_d })
    }

    /// `ŷ_s`: `(B·N, T', C)` with `T' ≤ T` kept tokens; the rest are filled
    /// with the mask token. `ŷ_d`: `(B, h/2, w/2, C_d)`. Returns `(h_s, h_d)`.
    pub fn dual_decode(&self, y_s: &Tensor, y_d: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, h2, w2, cd) = y_d.dims4()?;
        let (h, w) = (2 * h2, 2 * w2);
        let c = self.cfg.embed_dim;
        let t = self.cfg.tokens_per_window;
        let (n, kept, cs) = y_s.dims3()?;
        if cd != self.cfg.detail_dim || cs != c || kept > t || kept == 0 {
            return Err(DlfError::Shape(format!(
                "decoder inputs {:?} / {:?} do not match the model",
                y_s.dims(),
                y_d.dims()
            )));
        }
        if h % WINDOW != 0 || w % WINDOW != 0 || n != b * (h / WINDOW) * (w / WINDOW) {
            return Err(DlfError::Shape(format!(
                "{n} semantic windows do not match a {h}×{w} grid with batch {b}"
            )));
        }
        let mut lat = self.dec_in.forward(y_s)?;
        if kept < t {
            let fill = self.mask_token.t().reshape((1, 1, c))?.broadcast_as((n, t - kept, c))?;
            lat = Tensor::cat(&[&lat, &fill.contiguous()?], 1)?;
        }
        let lat = lat.broadcast_add(&self.dec_latent_pos.t())?;
        let ph = self.placeholders.t().unsqueeze(0)?.broadcast_as((n, WINDOW_TOKENS, c))?;
        let mut sem = Tensor::cat(&[&ph.contiguous()?, &lat], 1)?;
        let mut det = depth_to_space(&self.det_up.forward(y_d)?)?;
        for stage in &self.dec {
            (sem, det) = stage.forward(&sem, &det, self.interactive())?;
        }
        let grid = self.hs_norm.forward(&sem.narrow(1, 0, WINDOW_TOKENS)?)?;
        let h_s = window_reverse(&grid.contiguous()?, WINDOW, b, h, w)?;
        let h_d = self.hd_norm.forward(&det)?;
        Ok((h_s, h_d))
    }

    /// Semantic branch alone, as [`Model::dual_encode`] computes it with the
    /// interactive transforms off.
    pub fn semantic_encode(&self, emb: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = emb.dims4()?;
        if h % WINDOW != 0 || w % WINDOW != 0 || h == 0 || w == 0 {
            return Err(DlfError::Shape(format!("grid {h}×{w} is not a whole number of 16×16 windows")));
        }
        let n = b * (h / WINDOW) * (w / WINDOW);
        let t = self.cfg.tokens_per_window;
        let grid = window_partition(emb, WINDOW)?.broadcast_add(&self.sem_pos.t())?;
        let lat = self.latent_tokens.t().unsqueeze(0)?.broadcast_as((n, t, c))?;
        let mut sem = Tensor::cat(&[&grid, &lat], 1)?;
        for stage in &self.enc {
            sem = stage.sem.forward(&sem, None)?;
        }
        self.sem_out.forward(&self.sem_out_norm.forward(&sem.narrow(1, WINDOW_TOKENS, t)?)?)
    }

    /// `h_s` from all `T` semantic tokens of a `b × h × w` grid, without
    /// the detail branch.
    pub fn semantic_decode(&self, y_s: &Tensor, b: usize, h: usize, w: usize) -> Result<Tensor> {
        let c = self.cfg.embed_dim;
        let t = self.cfg.tokens_per_window;
        let n = y_s.dim(0)?;
        if n != b * (h / WINDOW) * (w / WINDOW) || y_s.dims()[1..] != [t, c] {
            return Err(DlfError::Shape(format!("semantic tokens {:?} do not match a {h}×{w} grid", y_s.dims())));
        }
        let lat = self.dec_in.forward(y_s)?.broadcast_add(&self.dec_latent_pos.t())?;
        let ph = self.placeholders.t().unsqueeze(0)?.broadcast_as((n, WINDOW_TOKENS, c))?;
        let mut sem = Tensor::cat(&[&ph.contiguous()?, &lat], 1)?;
        for stage in &self.dec {
            sem = stage.sem.forward(&sem, None)?;
        }
        let grid = self.hs_norm.forward(&sem.narrow(1, 0, WINDOW_TOKENS)?)?;
        window_reverse(&grid.contiguous()?, WINDOW, b, h, w)
    }

    pub fn fuse(&self, h_d: &Tensor, h_s: &Tensor) -> Result<Tensor> {
        self.adaptor.forward(h_d, h_s)
    }

    /// Generator on the `th × tw` top-left tokens of `ĥ`; unclamped.
    pub fn generate_raw(&self, h: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
        let crop = h.narrow(1, 0, th)?.narrow(2, 0, tw)?;
        self.generator.forward(&crop)
    }

    /// Pixels cropped to `orig_h × orig_w` and clamped to `[0, 1]`.
    pub fn generate(&self, h: &Tensor, orig_h: usize, orig_w: usize) -> Result<Tensor> {
        let x = self.generate_raw(h, orig_h.div_ceil(PATCH), orig_w.div_ceil(PATCH))?;
        Ok(x.narrow(1, 0, orig_h)?.narrow(2, 0, orig_w)?.clamp(0f32, 1f32)?)
    }

    pub fn auxiliary_encode(&self, x: &Tensor) -> Result<Tensor> {
        self.aux.forward(x)
    }
}

/// Token-grid extent covering `orig` pixels.
pub fn valid_tokens(orig: usize) -> usize {
    orig.div_ceil(PATCH)
}

#[cfg(test)]
mod tests {
    use super::*;
    pub(crate) fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            detail_dim: 4,
            stages: 2,
            heads: 2,
            mlp_ratio: 2,
            tokens_per_window: 32,
            codebook_size: 64,
            detail_window: 8,
            dw_kernel: 3,
            gen_channels: vec![8, 8, 8, 8],
            entropy_hidden: 8,
            variant,
            lambda_index: 0,
        }
    }

    fn pixels(b: usize, h: usize, w: usize) -> Tensor {
        Tensor::rand(0f32, 1f32, (b, h, w, 3), &Device::Cpu).unwrap()
    }

    #[test]
    fn shapes_for_one_and_four_windows() {
        let m = Model::new(tiny(Variant::Full), 1).unwrap();
        for (side, n) in [(256usize, 1usize), (512, 4)] {
            let x = pixels(1, side, side);
            let emb = m.patch_embed(&x).unwrap();
            assert_eq!(emb.dims(), &[1, side / 16, side / 16, 16]);
            let lat = m.dual_encode(&emb).unwrap();
            assert_eq!(lat.y_s.dims(), &[n, 32, 16]);
            assert_eq!(lat.y_d.dims(), &[1, side / 32, side / 32, 4]);
            let (hs, hd) = m.dual_decode(&lat.y_s, &lat.y_d).unwrap();
            assert_eq!(hs.dims(), emb.dims());
            assert_eq!(hd.dims(), emb.dims());
            let fused = m.fuse(&hd, &hs).unwrap();
            assert_eq!(fused.dims(), emb.dims());
            assert_eq!(m.auxiliary_encode(&x).unwrap().dims(), emb.dims());
        }
    }

    #[test]
    fn grid_not_a_window_multiple_is_rejected() {
        let m = Model::new(tiny(Variant::Full), 1).unwrap();
        let emb = m.patch_embed(&pixels(1, 128, 256)).unwrap();
        assert!(matches!(m.dual_encode(&emb), Err(DlfError::Shape(_))));
    }

    #[test]
    fn generator_upsamples_crops_and_clamps() {
        let m = Model::new(tiny(Variant::Full), 1).unwrap();
        let h = Tensor::randn(0f32, 3.0, (1, 16, 16, 16), &Device::Cpu).unwrap();
        let x = m.generate(&h, 250, 250).unwrap();
        assert_eq!(x.dims(), &[1, 250, 250, 3]);
        let v: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(m.generate_raw(&h, 16, 16).unwrap().dims(), &[1, 256, 256, 3]);
    }

    #[test]
    fn interactive_transform_is_identity_at_init() {
        let m = Model::new(tiny(Variant::Full), 2).unwrap();
        let dev = Device::Cpu;
        let fs = Tensor::randn(0f32, 1.0, (4, 288, 16), &dev).unwrap();
        let fd = Tensor::randn(0f32, 1.0, (1, 32, 32, 16), &dev).unwrap();
        let it = m.enc[0].it.as_ref().unwrap();
        let (s, d) = it.forward(&fs, &fd).unwrap();
        let eq = |a: &Tensor, b: &Tensor| {
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap() == b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert!(eq(&s, &fs) && eq(&d, &fd));
        let bad = Tensor::randn(0f32, 1.0, (3, 288, 16), &dev).unwrap();
        assert!(it.forward(&bad, &fd).is_err());
    }

    #[test]
    fn semantic_only_paths_match_the_dual_ones_without_it() {
        let m = Model::new(tiny(Variant::Full), 3).unwrap();
        m.set_interactive(false);
        let emb = m.patch_embed(&pixels(1, 256, 256)).unwrap();
        let lat = m.dual_encode(&emb).unwrap();
        let ys = m.semantic_encode(&emb).unwrap();
        let v = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&ys), v(&lat.y_s));
        let (hs, _) = m.dual_decode(&lat.y_s, &lat.y_d).unwrap();
        assert_eq!(v(&m.semantic_decode(&ys, 1, 16, 16).unwrap()), v(&hs));
    }

    #[test]
    fn no_interactive_variant_has_no_it_parameters() {
        let m = Model::new(tiny(Variant::NoInteractive), 0).unwrap();
        assert!(m.store.in_group(ParamGroup::Interactive).is_empty());
        let full = Model::new(tiny(Variant::Full), 0).unwrap();
        assert!(!full.store.in_group(ParamGroup::Interactive).is_empty());
    }
}
