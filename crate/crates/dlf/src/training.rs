//! Three-stage training.
//!
//! Stage 0 prepares what later stages freeze: the auxiliary encoder and the
//! generator are fitted as an autoencoder, then the semantic tokenizer
//! learns to reproduce the auxiliary features through its codebook.
//! Stage 1 trains the detail branch, interactive transforms, adaptor and
//! entropy model in latent space. Stage 2 fine-tunes everything except the
//! auxiliary encoder on pixels.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use dlf_core::Image;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{TrainConfig, Variant};
use crate::dataset::Dataset;
use crate::entropy::laplace_bits;
use crate::error::{DlfError, Result};
use crate::imageio::write_atomic;
use crate::network::{Model, PATCH, PIXEL_WINDOW};
use crate::nn::{images_to_tensor, unfold, Conv, Linear};
use crate::params::{seeded_rng, Checkpoint, ParamBuilder, ParamGroup};
use crate::quant::{codebook_loss, sq_noise, straight_through, vq_assign};

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)?.div(&denom)? * self.lr)?;
            var.set(&(var.as_detached_tensor() - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    fn state(&self, prefix: &str, device: &Device) -> Result<Vec<(String, Tensor)>> {
        let mut out = vec![(format!("{prefix}.t"), Tensor::new(&[self.t as f32], device)?)];
        for (n, m) in &self.m {
            out.push((format!("{prefix}.m.{n}"), m.clone()));
        }
        for (n, v) in &self.v {
            out.push((format!("{prefix}.v.{n}"), v.clone()));
        }
        Ok(out)
    }

    fn load_state(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if let Some(t) = tensors.get(&format!("{prefix}.t")) {
            self.t = t.to_vec1::<f32>()?[0] as u64;
        }
        for (key, t) in tensors {
            if let Some(n) = key.strip_prefix(&format!("{prefix}.m.")) {
                self.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = key.strip_prefix(&format!("{prefix}.v.")) {
                self.v.insert(n.to_string(), t.clone());
            }
        }
        Ok(())
    }
}

/// Fixed random-feature pyramid: a `3 × 3` projection to eight channels
/// with GELU at full, half and quarter resolution. The weights are not
/// trained.
pub struct Perceptual {
    weights: Vec<Tensor>,
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / 2, 2, w / 2, 2, c))?.mean(4)?.mean(2)?)
}

impl Perceptual {
    pub fn new(device: &Device) -> Result<Self> {
        let mut rng = seeded_rng(0x5eed, 7);
        let normal = Normal::new(0f32, (1.0f32 / 27.0).sqrt()).expect("positive std");
        let weights = (0..3)
            .map(|_| {
                let w: Vec<f32> = (0..27 * 8).map(|_| normal.sample(&mut rng)).collect();
                Ok(Tensor::from_vec(w, (27, 8), device)?)
            })
            .collect::<Result<_>>()?;
        Ok(Self { weights })
    }

    fn features(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (b, h, wd, _) = x.dims4()?;
        let cols = unfold(x, 3)?.reshape((b * h * wd, 27))?;
        Ok(cols.matmul(w)?.gelu()?)
    }

    /// Mean over scales of the feature MSE.
    pub fn loss(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let (mut x, mut y) = (x.clone(), y.clone());
        let mut total: Option<Tensor> = None;
        for (i, w) in self.weights.iter().enumerate() {
            if i > 0 {
                if x.dim(1)? % 2 != 0 || x.dim(2)? % 2 != 0 {
                    break;
                }
                x = avg_pool2(&x)?;
                y = avg_pool2(&y)?;
            }
            let d = (self.features(&x, w)? - self.features(&y, w)?)?.sqr()?.mean_all()?;
            total = Some(match total {
                None => d,
                Some(t) => (t + d)?,
            });
        }
        Ok((total.expect("at least one scale") / self.weights.len() as f64)?)
    }
}

/// Patch discriminator: two conv + pool stages and a per-patch logit.
pub struct Discriminator {
    c1: Conv,
    c2: Conv,
    out: Linear,
}

impl Discriminator {
    pub fn new(pb: &mut ParamBuilder) -> Result<Self> {
        let mut pb = pb.pp("disc");
        Ok(Self {
            c1: Conv::new(&mut pb, "conv1", 3, 16, 3)?,
            c2: Conv::new(&mut pb, "conv2", 16, 16, 3)?,
            out: Linear::new(&mut pb, "out", 16, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = avg_pool2(&self.c1.forward(x)?.gelu()?)?;
        let h = avg_pool2(&self.c2.forward(&h)?.gelu()?)?;
        self.out.forward(&h)
    }
}

fn softplus_mean(x: &Tensor) -> Result<Tensor> {
    Ok(crate::nn::softplus(x)?.mean_all()?)
}

/// One step's loss decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub phase: &'static str,
    pub lambda: f64,
    pub distortion: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub codebook: f64,
    /// Estimated detail bits per pixel; the rate term's argument.
    pub rate_bpp: f64,
    /// Estimated payload bits per pixel, semantic indices included.
    pub bpp: f64,
    pub perceptual_weight: f64,
    pub adversarial_weight: f64,
    /// `λ · rate_scale`.
    pub rate_weight: f64,
    pub total: f64,
}

impl LossReport {
    /// `distortion + w_p·perceptual + w_a·adversarial + codebook + w_r·rate`.
    pub fn weighted_sum(&self) -> f64 {
        self.distortion
            + self.perceptual_weight * self.perceptual
            + self.adversarial_weight * self.adversarial
            + self.codebook
            + self.rate_weight * self.rate_bpp
    }

    pub const CSV_HEADER: &'static str =
        "step,phase,lambda,total,distortion,perceptual,adversarial,codebook,rate_bpp,bpp";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.phase,
            self.lambda,
            self.total,
            self.distortion,
            self.perceptual,
            self.adversarial,
            self.codebook,
            self.rate_bpp,
            self.bpp
        )
    }
}

/// Stage-1 objective: latent MSE plus the weighted rate.
pub fn stage1_loss(mse: f64, lambda: f64, rate_scale: f64, bpp: f64) -> f64 {
    mse + lambda * rate_scale * bpp
}

/// Stage-2 objective from its parts.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss(
    l1: f64,
    perceptual: f64,
    perceptual_weight: f64,
    codebook: f64,
    lambda: f64,
    rate_scale: f64,
    bpp: f64,
    adversarial: f64,
    lambda_adv: f64,
) -> f64 {
    l1 + perceptual_weight * perceptual + codebook + lambda * rate_scale * bpp + lambda_adv * adversarial
}

/// Counts, per codebook entry, epochs in a row without a single use.
struct DeadCodes {
    idle: Vec<usize>,
    used: Vec<bool>,
    steps_in_epoch: u64,
    epoch_len: u64,
    patience: usize,
}

impl DeadCodes {
    fn new(k: usize, epoch_len: u64, patience: usize) -> Self {
        Self {
            idle: vec![0; k],
            used: vec![false; k],
            steps_in_epoch: 0,
            epoch_len: epoch_len.max(1),
            patience,
        }
    }

    /// Records a step's assignments; at an epoch boundary returns the codes
    /// idle for `patience` epochs.
    fn observe(&mut self, indices: &[u32]) -> Vec<usize> {
        for &i in indices {
            self.used[i as usize] = true;
        }
        self.steps_in_epoch += 1;
        if self.steps_in_epoch < self.epoch_len {
            return Vec::new();
        }
        self.steps_in_epoch = 0;
        let mut dead = Vec::new();
        for (i, used) in self.used.iter_mut().enumerate() {
            self.idle[i] = if *used { 0 } else { self.idle[i] + 1 };
            *used = false;
            if self.patience > 0 && self.idle[i] >= self.patience {
                self.idle[i] = 0;
                dead.push(i);
            }
        }
        dead
    }
}

/// Overwrites `rows` of `codebook` with randomly chosen encoder outputs.
fn reseed_codes(codebook: &Var, rows: &[usize], tokens: &Tensor, rng: &mut ChaCha8Rng) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let c = codebook.dim(1)?;
    let pool: Vec<f32> = tokens.detach().flatten_all()?.to_vec1()?;
    let n = pool.len() / c;
    let mut cb: Vec<f32> = codebook.as_detached_tensor().flatten_all()?.to_vec1()?;
    for &r in rows {
        let j = rng.random_range(0..n);
        for d in 0..c {
            cb[r * c + d] = pool[j * c + d] + 0.01 * (rng.random::<f32>() - 0.5);
        }
    }
    codebook.set(&Tensor::from_vec(cb, codebook.dims(), codebook.device())?)?;
    Ok(())
}

/// Batch as `(B, H, W, 3)` replication-padded to whole 256-pixel windows.
pub fn padded_batch(images: &[&Image], device: &Device) -> Result<Tensor> {
    let (w, h) = (images[0].width(), images[0].height());
    if images.iter().any(|i| i.width() != w || i.height() != h) {
        return Err(DlfError::InvalidInput("batch images differ in size".into()));
    }
    let x = images_to_tensor(images, device)?;
    let ph = h.div_ceil(PIXEL_WINDOW) * PIXEL_WINDOW - h;
    let pw = w.div_ceil(PIXEL_WINDOW) * PIXEL_WINDOW - w;
    Ok(x.pad_with_same(1, 0, ph)?.pad_with_same(2, 0, pw)?)
}

fn crop_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Ok(t.narrow(1, 0, h.div_ceil(PATCH))?.narrow(2, 0, w.div_ceil(PATCH))?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(f64::from(t.to_dtype(DType::F32)?.to_scalar::<f32>()?))
}

pub fn checkpoint_path(cfg: &TrainConfig) -> PathBuf {
    cfg.out_dir
        .join(format!("stage{}-lambda{}.safetensors", cfg.stage, cfg.model.lambda_index))
}

pub fn trace_path(cfg: &TrainConfig) -> PathBuf {
    cfg.out_dir
        .join(format!("trace-stage{}-lambda{}.csv", cfg.stage, cfg.model.lambda_index))
}

/// Latent-domain forward pass shared by stages 1 and 2.
struct Forward {
    h_hat: Tensor,
    y_s: Tensor,
    yq_s: Tensor,
    detail_codebook: Option<Tensor>,
    detail_bits: Tensor,
    semantic_bits: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub step: u64,
    opt: Adam,
    disc: Option<(Discriminator, Adam)>,
    perceptual: Perceptual,
    dead: Option<DeadCodes>,
}

impl Trainer {
    /// Builds the stage's model, loading the previous stage's checkpoint and
    /// resuming from this stage's own checkpoint if one exists.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
        let disc = if cfg.stage == 2 && cfg.adversarial {
            let mut rng = seeded_rng(cfg.seed, 5);
            let d = Discriminator::new(&mut ParamBuilder::new(&mut model.store, &mut rng, ParamGroup::Discriminator))?;
            Some((d, Adam::new(cfg.lr)))
        } else {
            None
        };
        let perceptual = Perceptual::new(model.device())?;
        let mut t = Self {
            opt: Adam::new(cfg.lr),
            model,
            step: 0,
            disc,
            perceptual,
            dead: None,
            cfg,
        };
        t.load_init()?;
        let own = checkpoint_path(&t.cfg);
        if own.is_file() {
            t.resume(&own)?;
        }
        Ok(t)
    }

    fn load_init(&mut self) -> Result<()> {
        let stage = self.cfg.stage;
        if stage == 0 {
            return Ok(());
        }
        let path = self.cfg.init_checkpoint.as_ref().ok_or_else(|| {
            DlfError::StageOrder(format!("stage {stage} needs a stage-{} checkpoint", stage - 1))
        })?;
        let ckpt = Checkpoint::read(path, self.model.device())?;
        if ckpt.manifest.stage != stage - 1 {
            return Err(DlfError::StageOrder(format!(
                "stage {stage} must start from stage {}, {} is stage {}",
                stage - 1,
                path.display(),
                ckpt.manifest.stage
            )));
        }
        let store = &self.model.store;
        if stage == 1 {
            store.load_groups(&ckpt, &[ParamGroup::Semantic, ParamGroup::Auxiliary, ParamGroup::Generator], &[])
        } else {
            if ckpt.manifest.variant != self.cfg.model.variant.name() {
                return Err(DlfError::CheckpointMismatch(format!(
                    "checkpoint variant {} differs from {}",
                    ckpt.manifest.variant, self.cfg.model.variant
                )));
            }
            let groups: Vec<ParamGroup> = ParamGroup::ALL
                .into_iter()
                .filter(|g| *g != ParamGroup::Discriminator)
                .collect();
            // The detail codebook size depends on the lambda index.
            store.load_groups(&ckpt, &groups, &["detail.codebook"])
        }
    }

    fn resume(&mut self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::read(path, self.model.device())?;
        let m = &ckpt.manifest;
        if m.stage != self.cfg.stage || m.config_hash != self.cfg.model.hash() {
            return Err(DlfError::CheckpointMismatch(format!(
                "{} belongs to another run (stage {}, config {})",
                path.display(),
                m.stage,
                m.config_hash
            )));
        }
        self.model.store.load_groups(&ckpt, &ParamGroup::ALL, &[])?;
        self.opt.load_state("optim", &ckpt.tensors)?;
        if let Some((_, opt)) = &mut self.disc {
            opt.load_state("optim_disc", &ckpt.tensors)?;
        }
        self.step = m.step;
        Ok(())
    }

    /// All steps of the stage, the tokenizer phase included.
    pub fn total_steps(&self) -> u64 {
        self.cfg.steps + if self.cfg.stage == 0 { self.cfg.tokenizer_steps } else { 0 }
    }

    pub fn lambda(&self, step: u64) -> f64 {
        match self.cfg.stage {
            0 => 0.0,
            1 => self.cfg.schedule.lambda(step),
            _ => self.cfg.lambda,
        }
    }

    pub fn phase(&self, step: u64) -> &'static str {
        match self.cfg.stage {
            0 if step < self.cfg.steps => "autoencoder",
            0 => "tokenizer",
            1 => "latent",
            _ => "pixel",
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dev = self.model.device();
        let mut extra = self.opt.state("optim", dev)?;
        if let Some((_, opt)) = &self.disc {
            extra.extend(opt.state("optim_disc", dev)?);
        }
        let bytes = self
            .model
            .store
            .to_safetensors(&self.model.manifest(self.cfg.stage, self.step), &extra)?;
        write_atomic(path, &bytes)
    }

    fn frozen_groups(&self, step: u64) -> Vec<ParamGroup> {
        use ParamGroup::*;
        let mut frozen: Vec<ParamGroup> = match (self.cfg.stage, self.phase(step)) {
            (0, "autoencoder") => vec![Semantic, Detail, Interactive, Adaptor, Entropy],
            (0, _) => vec![Detail, Interactive, Adaptor, Generator, Auxiliary, Entropy],
            (1, _) => vec![Semantic, Generator, Auxiliary],
            _ => vec![Auxiliary],
        };
        frozen.push(Discriminator);
        frozen
    }

    /// Learning rate at `step`, annealed within its phase.
    pub fn lr_at(&self, step: u64) -> f64 {
        let (start, len) = match (self.cfg.stage, self.phase(step)) {
            (0, "tokenizer") => (self.cfg.steps, self.cfg.tokenizer_steps),
            _ => (0, self.cfg.steps),
        };
        let t = if len <= 1 { 0.0 } else { (step - start) as f64 / (len - 1) as f64 };
        let r = self.cfg.lr_final_ratio;
        self.cfg.lr * (r + (1.0 - r) * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos()))
    }

    /// Draws the step's batch from `train`.
    pub fn sample_batch<'a>(&self, train: &'a [Image], rng: &mut ChaCha8Rng) -> Vec<&'a Image> {
        (0..self.cfg.batch).map(|_| &train[rng.random_range(0..train.len())]).collect()
    }

    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        seeded_rng(self.cfg.seed, (u64::from(self.cfg.stage) + 1) << 40 | step)
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &[&Image], rng: &mut ChaCha8Rng) -> Result<LossReport> {
        let step = self.step;
        self.model.store.freeze_only(&self.frozen_groups(step));
        let (loss, report, tokens) = match (self.cfg.stage, self.phase(step)) {
            (0, "autoencoder") => self.autoencoder_loss(batch)?,
            (0, _) => self.tokenizer_loss(batch)?,
            (1, _) => self.latent_loss(batch, rng)?,
            _ => self.pixel_loss(batch, rng)?,
        };
        if !report.total.is_finite() {
            return Err(DlfError::InvalidInput(format!("loss diverged at step {step}")));
        }
        let params = self.model.store.trainable();
        let grads = loss.backward()?;
        self.opt.lr = self.lr_at(step);
        self.opt.step(&params, &grads)?;
        if let Some((indices, y_s)) = tokens {
            let dead = self.dead.get_or_insert_with(|| {
                DeadCodes::new(self.model.cfg.codebook_size, 1, self.cfg.dead_code_epochs)
            });
            let rows = dead.observe(&indices);
            reseed_codes(self.model.codebook.var(), &rows, &y_s, rng)?;
        }
        self.step += 1;
        Ok(report)
    }

    fn report(&self, distortion: f64) -> LossReport {
        let step = self.step;
        LossReport {
            step,
            phase: self.phase(step),
            lambda: self.lambda(step),
            distortion,
            perceptual: 0.0,
            adversarial: 0.0,
            codebook: 0.0,
            rate_bpp: 0.0,
            bpp: 0.0,
            perceptual_weight: 0.0,
            adversarial_weight: 0.0,
            rate_weight: 0.0,
            total: distortion,
        }
    }

    fn autoencoder_loss(&self, batch: &[&Image]) -> Result<(Tensor, LossReport, Option<(Vec<u32>, Tensor)>)> {
        let (h, w) = (batch[0].height(), batch[0].width());
        let m = &self.model;
        let xp = padded_batch(batch, m.device())?;
        let x = xp.narrow(1, 0, h)?.narrow(2, 0, w)?;
        let feat = m.auxiliary_encode(&xp)?;
        let rec = m.generate_raw(&feat, h.div_ceil(PATCH), w.div_ceil(PATCH))?;
        let rec = rec.narrow(1, 0, h)?.narrow(2, 0, w)?;
        let loss = (rec - x)?.sqr()?.mean_all()?;
        let report = self.report(scalar(&loss)?);
        Ok((loss, report, None))
    }

    fn tokenizer_loss(&self, batch: &[&Image]) -> Result<(Tensor, LossReport, Option<(Vec<u32>, Tensor)>)> {
        let (h, w) = (batch[0].height(), batch[0].width());
        let m = &self.model;
        m.set_interactive(false);
        let xp = padded_batch(batch, m.device())?;
        let target = crop_tokens(&m.auxiliary_encode(&xp)?.detach(), h, w)?;
        let emb = m.patch_embed(&xp)?;
        let (b, gh, gw, _) = emb.dims4()?;
        let y_s = m.semantic_encode(&emb)?;
        let (idx, yq) = vq_assign(&y_s, &m.codebook.t())?;
        let h_s = m.semantic_decode(&straight_through(&y_s, &yq)?, b, gh, gw)?;
        m.set_interactive(true);
        let mse = (crop_tokens(&h_s, h, w)? - target)?.sqr()?.mean_all()?;
        let cb = codebook_loss(&y_s, &yq, self.cfg.beta)?;
        let loss = (&mse + &cb)?;
        let mut report = self.report(scalar(&mse)?);
        report.codebook = scalar(&cb)?;
        report.total = report.weighted_sum();
        Ok((loss, report, Some((idx, y_s.detach()))))
    }

    fn kept_tokens(&self, rng: &mut ChaCha8Rng) -> usize {
        let t = self.model.cfg.tokens_per_window;
        if self.model.cfg.variant == Variant::NoDetail {
            // Quarter steps of the full token count.
            (t * rng.random_range(1..=4) / 4).max(1)
        } else {
            t
        }
    }

    fn latent_forward(&self, xp: &Tensor, rng: &mut ChaCha8Rng) -> Result<Forward> {
        let m = &self.model;
        let b = xp.dim(0)?;
        let lat = m.dual_encode(&m.patch_embed(xp)?)?;
        let kept = self.kept_tokens(rng);
        let y_s = lat.y_s.narrow(1, 0, kept)?.contiguous()?;
        let (_, yq_s) = vq_assign(&y_s, &m.codebook.t())?;
        let (_, h2, w2, _) = lat.y_d.dims4()?;
        let dev = m.device();
        let mut detail_codebook = None;
        let (y_d, detail_bits) = match m.cfg.variant {
            Variant::NoDetail => (lat.y_d.zeros_like()?, Tensor::zeros(b, DType::F32, dev)?),
            Variant::VqDetail => {
                let (_, q) = vq_assign(&lat.y_d, &m.detail_codebook()?)?;
                detail_codebook = Some(codebook_loss(&lat.y_d, &q, self.cfg.beta)?);
                let bits = (h2 * w2) as f64 * f64::from(dlf_core::bits_per_index(m.cfg.detail_codebook_size() as u32));
                (straight_through(&lat.y_d, &q)?, (Tensor::ones(b, DType::F32, dev)? * bits)?)
            }
            Variant::Full | Variant::NoInteractive => {
                let steps = m.steps()?;
                let noisy = sq_noise(&lat.y_d, &steps, rng)?;
                let sym = noisy.broadcast_div(&steps)?;
                let (mu, scale) = m.entropy.params_all(&sym)?;
                (noisy, laplace_bits(&sym, &mu, &scale)?)
            }
        };
        let (h_s, h_d) = m.dual_decode(&straight_through(&y_s, &yq_s)?, &y_d)?;
        let windows = y_s.dim(0)? / b;
        let semantic_bits =
            (windows * kept) as f64 * f64::from(dlf_core::bits_per_index(m.cfg.codebook_size as u32));
        Ok(Forward {
            h_hat: m.fuse(&h_d, &h_s)?,
            y_s,
            yq_s,
            detail_codebook,
            detail_bits,
            semantic_bits,
        })
    }

    /// Sets the rate fields; returns the detail bpp tensor.
    fn rate(&self, f: &Forward, pixels: usize, report: &mut LossReport) -> Result<Tensor> {
        let rate = (f.detail_bits.mean_all()? / pixels as f64)?;
        report.rate_bpp = scalar(&rate)?;
        report.bpp = report.rate_bpp + f.semantic_bits / pixels as f64;
        report.rate_weight = report.lambda * self.cfg.rate_scale;
        Ok(rate)
    }

    fn latent_loss(
        &self,
        batch: &[&Image],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, LossReport, Option<(Vec<u32>, Tensor)>)> {
        let (h, w) = (batch[0].height(), batch[0].width());
        let m = &self.model;
        let xp = padded_batch(batch, m.device())?;
        let target = crop_tokens(&m.auxiliary_encode(&xp)?.detach(), h, w)?;
        let f = self.latent_forward(&xp, rng)?;
        let mse = (crop_tokens(&f.h_hat, h, w)? - target)?.sqr()?.mean_all()?;
        let mut report = self.report(scalar(&mse)?);
        let rate = self.rate(&f, h * w, &mut report)?;
        let mut loss = (&mse + (rate * report.rate_weight)?)?;
        if let Some(cb) = &f.detail_codebook {
            report.codebook = scalar(cb)?;
            loss = (loss + cb)?;
        }
        report.total = report.weighted_sum();
        Ok((loss, report, None))
    }

    fn pixel_loss(
        &mut self,
        batch: &[&Image],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, LossReport, Option<(Vec<u32>, Tensor)>)> {
        let (h, w) = (batch[0].height(), batch[0].width());
        let xp = padded_batch(batch, self.model.device())?;
        let x = xp.narrow(1, 0, h)?.narrow(2, 0, w)?;
        let f = self.latent_forward(&xp, rng)?;
        let rec = self.model.generate_raw(&f.h_hat, h.div_ceil(PATCH), w.div_ceil(PATCH))?;
        let rec = rec.narrow(1, 0, h)?.narrow(2, 0, w)?;
        let l1 = (&rec - &x)?.abs()?.mean_all()?;
        let perc = self.perceptual.loss(&rec, &x)?;
        let mut cb = codebook_loss(&f.y_s, &f.yq_s, self.cfg.beta)?;
        if let Some(d) = &f.detail_codebook {
            cb = (cb + d)?;
        }
        let mut report = self.report(scalar(&l1)?);
        report.perceptual = scalar(&perc)?;
        report.perceptual_weight = self.cfg.perceptual_weight;
        report.codebook = scalar(&cb)?;
        let rate = self.rate(&f, h * w, &mut report)?;
        let mut loss = (((&l1 + (perc * self.cfg.perceptual_weight)?)? + cb)? + (rate * report.rate_weight)?)?;
        if let Some((disc, opt)) = &mut self.disc {
            let adv = softplus_mean(&disc.forward(&rec)?.neg()?)?;
            report.adversarial = scalar(&adv)?;
            report.adversarial_weight = self.cfg.lambda_adv;
            loss = (loss + (adv * self.cfg.lambda_adv)?)?;
            // Discriminator update on the detached reconstruction.
            self.model.store.set_frozen(ParamGroup::Discriminator, false);
            let d_loss = (softplus_mean(&disc.forward(&x)?.neg()?)? + softplus_mean(&disc.forward(&rec.detach())?)?)?;
            let d_params = self.model.store.in_group(ParamGroup::Discriminator);
            opt.lr = self.cfg.lr;
            opt.step(&d_params, &d_loss.backward()?)?;
            self.model.store.set_frozen(ParamGroup::Discriminator, true);
        }
        report.total = report.weighted_sum();
        let tokens = vq_assign(&f.y_s, &self.model.codebook.t())?.0;
        Ok((loss, report, Some((tokens, f.y_s.detach()))))
    }

    /// Runs the stage to completion, appending to the trace and saving the
    /// checkpoint every `save_every` steps and at the end.
    pub fn run(&mut self, data: &Dataset, mut on_report: impl FnMut(&LossReport)) -> Result<Vec<LossReport>> {
        if data.train.is_empty() {
            return Err(DlfError::EmptyDataset("training split is empty".into()));
        }
        let epoch = (data.train.len() as u64).div_ceil(self.cfg.batch as u64);
        self.dead = Some(DeadCodes::new(
            self.model.cfg.codebook_size,
            epoch,
            self.cfg.dead_code_epochs,
        ));
        std::fs::create_dir_all(&self.cfg.out_dir).map_err(|e| DlfError::io(&self.cfg.out_dir, e))?;
        write_atomic(
            &self.cfg.out_dir.join(format!("config-stage{}-lambda{}.txt", self.cfg.stage, self.cfg.model.lambda_index)),
            self.cfg.to_kv().as_bytes(),
        )?;
        let mut trace = self.open_trace()?;
        let total = self.total_steps();
        let mut reports = Vec::new();
        while self.step < total {
            let mut rng = self.step_rng(self.step);
            let batch = self.sample_batch(&data.train, &mut rng);
            let r = self.train_step(&batch, &mut rng)?;
            writeln!(trace, "{}", r.csv_row()).map_err(|e| DlfError::io(&trace_path(&self.cfg), e))?;
            on_report(&r);
            reports.push(r);
            if self.cfg.save_every > 0 && self.step % self.cfg.save_every == 0 && self.step < total {
                trace.flush().map_err(|e| DlfError::io(&trace_path(&self.cfg), e))?;
                self.save(&checkpoint_path(&self.cfg))?;
            }
        }
        trace.flush().map_err(|e| DlfError::io(&trace_path(&self.cfg), e))?;
        self.save(&checkpoint_path(&self.cfg))?;
        Ok(reports)
    }

    /// Opens the trace for appending, dropping rows past the resume point.
    fn open_trace(&self) -> Result<std::io::BufWriter<std::fs::File>> {
        let path = trace_path(&self.cfg);
        let mut keep = String::from(LossReport::CSV_HEADER);
        keep.push('\n');
        if let Ok(old) = std::fs::read_to_string(&path) {
            for line in old.lines().skip(1) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < self.step) {
                    keep.push_str(line);
                    keep.push('\n');
                }
            }
        }
        write_atomic(&path, keep.as_bytes())?;
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| DlfError::io(&path, e))?;
        Ok(std::io::BufWriter::new(file))
    }
}

/// Mean PSNR of `generate(auxiliary_encode(x))` over `images`.
pub fn autoencoder_psnr(model: &Model, images: &[Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(DlfError::EmptyDataset("no images to score".into()));
    }
    let mut sum = 0.0;
    for img in images {
        let xp = padded_batch(&[img], model.device())?;
        let rec = model.generate(&model.auxiliary_encode(&xp)?, img.height(), img.width())?;
        sum += dlf_core::psnr(img, &crate::nn::tensor_to_image(&rec, 0)?)?;
    }
    Ok(sum / images.len() as f64)
}

/// Trains one stage end to end: loads the dataset, runs and saves.
pub fn train(cfg: TrainConfig, on_report: impl FnMut(&LossReport)) -> Result<(PathBuf, Vec<LossReport>)> {
    let data = Dataset::load(&cfg.data)?;
    let mut trainer = Trainer::new(cfg)?;
    let reports = trainer.run(&data, on_report)?;
    Ok((checkpoint_path(&trainer.cfg), reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage1_example() {
        assert_eq!(stage1_loss(2.0, 24.0, 1.0, 1.0), 26.0);
    }

    #[test]
    fn stage2_example_sums_parts() {
        let l = stage2_loss(0.1, 0.2, 1.0, 0.05, 5.8, 1.0, 0.1, 0.5, 0.8);
        assert!((l - (0.1 + 0.2 + 0.05 + 0.58 + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let v = Var::new(&[1f32, -1.0], &Device::Cpu).unwrap();
        let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&[("w".into(), v.clone())], &grads).unwrap();
        let after: Vec<f32> = v.as_tensor().to_vec1().unwrap();
        assert!((after[0] - 0.9).abs() < 1e-5 && (after[1] + 0.9).abs() < 1e-5, "{after:?}");
    }

    #[test]
    fn dead_codes_after_patience_epochs() {
        let mut d = DeadCodes::new(3, 2, 2);
        assert!(d.observe(&[0]).is_empty());
        assert!(d.observe(&[1]).is_empty());
        assert!(d.observe(&[0]).is_empty());
        assert_eq!(d.observe(&[1]), vec![2]);
    }

    #[test]
    fn perceptual_is_zero_on_equal_inputs() {
        let p = Perceptual::new(&Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 16, 16, 3), &Device::Cpu).unwrap();
        assert_eq!(scalar(&p.loss(&x, &x).unwrap()).unwrap(), 0.0);
        let y = (&x + 0.1).unwrap();
        assert!(scalar(&p.loss(&x, &y).unwrap()).unwrap() > 0.0);
    }
}
