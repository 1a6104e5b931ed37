//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; values are validated when the typed config is built. The same
//! format stores the model configuration inside checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{DlfError, Result};

/// Model variants. `Full` is the dual-branch codec; the others are the
/// ablations evaluated against it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoDetail,
    NoInteractive,
    VqDetail,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoDetail, Variant::NoInteractive, Variant::VqDetail];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDetail => "no_detail",
            Variant::NoInteractive => "no_interactive",
            Variant::VqDetail => "vq_detail",
        }
    }
}

impl FromStr for Variant {
    type Err = DlfError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DlfError::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Parsed `key = value` pairs that are consumed as typed fields are read.
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DlfError::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(DlfError::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| DlfError::Config(format!("invalid value {v:?} for key {key}"))),
        }
    }

    pub fn take_opt(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).filter(|v| !v.is_empty())
    }

    pub fn take_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.entries.remove(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| DlfError::Config(format!("invalid list {v:?} for key {key}")))
                })
                .collect(),
        }
    }

    /// Fails with every key that nothing consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
            Err(DlfError::Config(format!("unknown key(s): {}", keys.join(", "))))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Token width `C` of the embedded grid and of the semantic codebook.
    pub embed_dim: usize,
    /// Channel count `C_d` of the detail latent.
    pub detail_dim: usize,
    pub stages: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tokens_per_window: usize,
    pub codebook_size: usize,
    pub detail_window: usize,
    pub dw_kernel: usize,
    /// Output width of each of the four ×2 generator stages.
    pub gen_channels: Vec<usize>,
    pub entropy_hidden: usize,
    pub variant: Variant,
    pub lambda_index: u8,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            detail_dim: 32,
            stages: 4,
            heads: 4,
            mlp_ratio: 2,
            tokens_per_window: 32,
            codebook_size: 4096,
            detail_window: 8,
            dw_kernel: 7,
            gen_channels: vec![64, 32, 16, 16],
            entropy_hidden: 64,
            variant: Variant::Full,
            lambda_index: 0,
        }
    }
}

impl ModelConfig {
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            embed_dim: kv.take("embed_dim", d.embed_dim)?,
            detail_dim: kv.take("detail_dim", d.detail_dim)?,
            stages: kv.take("stages", d.stages)?,
            heads: kv.take("heads", d.heads)?,
            mlp_ratio: kv.take("mlp_ratio", d.mlp_ratio)?,
            tokens_per_window: kv.take("tokens_per_window", d.tokens_per_window)?,
            codebook_size: kv.take("codebook_size", d.codebook_size)?,
            detail_window: kv.take("detail_window", d.detail_window)?,
            dw_kernel: kv.take("dw_kernel", d.dw_kernel)?,
            gen_channels: kv.take_list("gen_channels", &d.gen_channels)?,
            entropy_hidden: kv.take("entropy_hidden", d.entropy_hidden)?,
            variant: kv.take("variant", d.variant)?,
            lambda_index: kv.take("lambda_index", d.lambda_index)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DlfError::Config(m.to_string()));
        if self.embed_dim == 0 || self.detail_dim == 0 || self.stages == 0 {
            return bad("embed_dim, detail_dim and stages must be positive");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be a positive multiple of heads");
        }
        if self.tokens_per_window == 0 || self.codebook_size < 2 {
            return bad("tokens_per_window must be positive and codebook_size at least 2");
        }
        if self.codebook_size > u32::MAX as usize {
            return bad("codebook_size does not fit 32 bits");
        }
        if self.detail_window == 0 || 16 % self.detail_window != 0 {
            return bad("detail_window must divide 16");
        }
        if self.dw_kernel % 2 == 0 {
            return bad("dw_kernel must be odd");
        }
        if self.gen_channels.len() != 4 || self.gen_channels.contains(&0) {
            return bad("gen_channels needs four positive widths");
        }
        if self.lambda_index > 3 {
            return bad("lambda_index must be in 0..=3");
        }
        Ok(())
    }

    /// Codebook size of the vector-quantized detail latent in the
    /// `vq_detail` ablation: 16, 64, 256, 1024 for lambda indices 0..=3.
    pub fn detail_codebook_size(&self) -> usize {
        1 << (4 + 2 * self.lambda_index as usize)
    }

    pub fn to_kv(&self) -> String {
        let gen: Vec<String> = self.gen_channels.iter().map(|c| c.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "detail_dim = {}", self.detail_dim);
        let _ = writeln!(s, "stages = {}", self.stages);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "tokens_per_window = {}", self.tokens_per_window);
        let _ = writeln!(s, "codebook_size = {}", self.codebook_size);
        let _ = writeln!(s, "detail_window = {}", self.detail_window);
        let _ = writeln!(s, "dw_kernel = {}", self.dw_kernel);
        let _ = writeln!(s, "gen_channels = {}", gen.join(","));
        let _ = writeln!(s, "entropy_hidden = {}", self.entropy_hidden);
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "lambda_index = {}", self.lambda_index);
        s
    }

    /// Hash of everything that determines parameter shapes and semantics,
    /// except the lambda index, which checkpoints carry separately.
    pub fn hash(&self) -> String {
        let canonical = Self {
            lambda_index: 0,
            ..self.clone()
        }
        .to_kv();
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Piecewise lambda schedule of stage 1: a small warmup value, a linear ramp,
/// then a hold. Step counts are multiplied by `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSchedule {
    pub warmup_value: f64,
    pub warmup_steps: u64,
    pub ramp_start: f64,
    pub ramp_end: f64,
    pub ramp_steps: u64,
    pub hold_steps: u64,
    pub scale: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            warmup_value: 0.001,
            warmup_steps: 10_000,
            ramp_start: 2.0,
            ramp_end: 24.0,
            ramp_steps: 90_000,
            hold_steps: 400_000,
            scale: 1.0,
        }
    }
}

impl LambdaSchedule {
    fn scaled(&self, steps: u64) -> u64 {
        (steps as f64 * self.scale).round() as u64
    }

    pub fn warmup(&self) -> u64 {
        self.scaled(self.warmup_steps)
    }

    pub fn ramp(&self) -> u64 {
        self.scaled(self.ramp_steps)
    }

    pub fn total_steps(&self) -> u64 {
        self.warmup() + self.ramp() + self.scaled(self.hold_steps)
    }

    pub fn lambda(&self, step: u64) -> f64 {
        let (warmup, ramp) = (self.warmup(), self.ramp());
        if step < warmup {
            self.warmup_value
        } else if step - warmup >= ramp {
            self.ramp_end
        } else {
            let t = (step - warmup) as f64 / ramp as f64;
            self.ramp_start + t * (self.ramp_end - self.ramp_start)
        }
    }
}

/// Stage-2 lambda for each lambda index.
pub const STAGE2_LAMBDAS: [f64; 4] = [5.8, 8.5, 16.0, 28.0];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Image directory; `None` selects the procedural toy set.
    pub root: Option<PathBuf>,
    pub crop: usize,
    pub train_split: f64,
    pub val_split: f64,
    pub test_split: f64,
    pub seed: u64,
    pub max_images: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            root: None,
            crop: 64,
            train_split: 0.8,
            val_split: 0.1,
            test_split: 0.1,
            seed: 0,
            max_images: 500,
        }
    }
}

impl DatasetSpec {
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = Self::default();
        let spec = Self {
            root: kv.take_opt("data_dir").map(PathBuf::from),
            crop: kv.take("crop", d.crop)?,
            train_split: kv.take("train_split", d.train_split)?,
            val_split: kv.take("val_split", d.val_split)?,
            test_split: kv.take("test_split", d.test_split)?,
            seed: kv.take("data_seed", d.seed)?,
            max_images: kv.take("max_images", d.max_images)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 16 != 0 {
            return Err(DlfError::Config(format!("crop {} is not a positive multiple of 16", self.crop)));
        }
        let splits = [self.train_split, self.val_split, self.test_split];
        if splits.iter().any(|s| !(0.0..=1.0).contains(s)) || (splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DlfError::Config("split ratios must be in [0, 1] and sum to 1".into()));
        }
        if self.max_images == 0 {
            return Err(DlfError::Config("max_images must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        if let Some(root) = &self.root {
            let _ = writeln!(s, "data_dir = {}", root.display());
        }
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "train_split = {}", self.train_split);
        let _ = writeln!(s, "val_split = {}", self.val_split);
        let _ = writeln!(s, "test_split = {}", self.test_split);
        let _ = writeln!(s, "data_seed = {}", self.seed);
        let _ = writeln!(s, "max_images = {}", self.max_images);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub schedule: LambdaSchedule,
    /// Fixed lambda of stage 2; defaults to the value of `lambda_index`.
    pub lambda: f64,
    pub lambda_adv: f64,
    pub adversarial: bool,
    pub beta: f64,
    pub perceptual_weight: f64,
    /// Rate term multiplier applied to bits per pixel.
    pub rate_scale: f64,
    pub batch: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate to `lr · lr_final_ratio` over each
    /// training phase; 1 keeps it constant.
    pub lr_final_ratio: f64,
    pub steps: u64,
    /// Stage 0 only: steps spent on the semantic tokenizer after the
    /// autoencoder.
    pub tokenizer_steps: u64,
    pub seed: u64,
    pub init_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub save_every: u64,
    pub dead_code_epochs: usize,
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DlfError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let stage: u8 = kv.take("stage", 0)?;
        if stage > 2 {
            return Err(DlfError::Config(format!("stage {stage} is not 0, 1 or 2")));
        }
        let model = ModelConfig::from_kv(kv)?;
        let data = DatasetSpec::from_kv(kv)?;
        let ds = LambdaSchedule::default();
        let schedule = LambdaSchedule {
            warmup_value: kv.take("lambda_warmup_value", ds.warmup_value)?,
            warmup_steps: kv.take("lambda_warmup_steps", ds.warmup_steps)?,
            ramp_start: kv.take("lambda_ramp_start", ds.ramp_start)?,
            ramp_end: kv.take("lambda_ramp_end", ds.ramp_end)?,
            ramp_steps: kv.take("lambda_ramp_steps", ds.ramp_steps)?,
            hold_steps: kv.take("lambda_hold_steps", ds.hold_steps)?,
            scale: kv.take("step_scale", ds.scale)?,
        };
        let default_lr = match stage {
            0 => 1e-3,
            1 => 4e-5,
            _ => 2e-5,
        };
        let cfg = Self {
            stage,
            lambda: kv.take("lambda", STAGE2_LAMBDAS[model.lambda_index as usize])?,
            lambda_adv: kv.take("lambda_adv", 0.8)?,
            adversarial: kv.take("adversarial", false)?,
            beta: kv.take("beta", 0.25)?,
            perceptual_weight: kv.take("perceptual_weight", 1.0)?,
            rate_scale: kv.take("rate_scale", 1.0)?,
            batch: kv.take("batch", 4)?,
            lr: kv.take("lr", default_lr)?,
            lr_final_ratio: kv.take("lr_final_ratio", 1.0)?,
            steps: kv.take("steps", if stage == 1 { schedule.total_steps() } else { 1000 })?,
            tokenizer_steps: kv.take("tokenizer_steps", 0)?,
            seed: kv.take("seed", 0)?,
            init_checkpoint: kv.take_opt("init_checkpoint").map(PathBuf::from),
            out_dir: kv.take_opt("out_dir").map_or_else(|| PathBuf::from("runs"), PathBuf::from),
            save_every: kv.take("save_every", 0)?,
            dead_code_epochs: kv.take("dead_code_epochs", 5)?,
            model,
            data,
            schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda", self.lambda),
            ("lambda_adv", self.lambda_adv),
            ("beta", self.beta),
            ("perceptual_weight", self.perceptual_weight),
            ("rate_scale", self.rate_scale),
            ("lambda_warmup_value", self.schedule.warmup_value),
            ("step_scale", self.schedule.scale),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DlfError::Config(format!("{k} must be finite and non-negative")));
            }
        }
        if self.batch == 0 {
            return Err(DlfError::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DlfError::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_final_ratio) {
            return Err(DlfError::Config("lr_final_ratio must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Effective configuration, every key included.
    pub fn to_kv(&self) -> String {
        let s = &self.schedule;
        let mut out = String::new();
        let _ = writeln!(out, "stage = {}", self.stage);
        out.push_str(&self.model.to_kv());
        out.push_str(&self.data.to_kv());
        let _ = writeln!(out, "lambda_warmup_value = {}", s.warmup_value);
        let _ = writeln!(out, "lambda_warmup_steps = {}", s.warmup_steps);
        let _ = writeln!(out, "lambda_ramp_start = {}", s.ramp_start);
        let _ = writeln!(out, "lambda_ramp_end = {}", s.ramp_end);
        let _ = writeln!(out, "lambda_ramp_steps = {}", s.ramp_steps);
        let _ = writeln!(out, "lambda_hold_steps = {}", s.hold_steps);
        let _ = writeln!(out, "step_scale = {}", s.scale);
        let _ = writeln!(out, "lambda = {}", self.lambda);
        let _ = writeln!(out, "lambda_adv = {}", self.lambda_adv);
        let _ = writeln!(out, "adversarial = {}", self.adversarial);
        let _ = writeln!(out, "beta = {}", self.beta);
        let _ = writeln!(out, "perceptual_weight = {}", self.perceptual_weight);
        let _ = writeln!(out, "rate_scale = {}", self.rate_scale);
        let _ = writeln!(out, "batch = {}", self.batch);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "lr_final_ratio = {}", self.lr_final_ratio);
        let _ = writeln!(out, "steps = {}", self.steps);
        let _ = writeln!(out, "tokenizer_steps = {}", self.tokenizer_steps);
        let _ = writeln!(out, "seed = {}", self.seed);
        if let Some(p) = &self.init_checkpoint {
            let _ = writeln!(out, "init_checkpoint = {}", p.display());
        }
        let _ = writeln!(out, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(out, "save_every = {}", self.save_every);
        let _ = writeln!(out, "dead_code_epochs = {}", self.dead_code_epochs);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_breakpoints() {
        let s = LambdaSchedule::default();
        assert_eq!(s.lambda(0), 0.001);
        assert_eq!(s.lambda(9_999), 0.001);
        assert_eq!(s.lambda(10_000), 2.0);
        assert_eq!(s.lambda(10_000 + 45_000), 13.0);
        assert_eq!(s.lambda(100_000), 24.0);
        assert_eq!(s.lambda(480_000), 24.0);
        assert_eq!(s.total_steps(), 500_000);
    }

    #[test]
    fn scaled_schedule_keeps_its_shape() {
        let s = LambdaSchedule {
            scale: 0.01,
            ..Default::default()
        };
        assert_eq!((s.warmup(), s.ramp(), s.total_steps()), (100, 900, 5000));
        assert_eq!(s.lambda(99), 0.001);
        assert_eq!(s.lambda(100 + 450), 13.0);
        assert_eq!(s.lambda(1000), 24.0);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = TrainConfig::parse("stage = 1\nbogus = 3\nalso_bad=1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("also_bad") && msg.contains("bogus"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = TrainConfig::parse("stage = 2\nembed_dim = 32\nheads = 2\nvariant = no_detail\ncrop=32\n").unwrap();
        assert_eq!(cfg.lambda, 5.8);
        assert_eq!(TrainConfig::parse(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values() {
        assert!(TrainConfig::parse("crop = 20").is_err());
        assert!(TrainConfig::parse("beta = -1").is_err());
        assert!(TrainConfig::parse("variant = half").is_err());
        assert!(TrainConfig::parse("train_split = 0.5").is_err());
        assert!(TrainConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn hash_ignores_lambda_index_only() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            lambda_index: 3,
            ..a.clone()
        };
        let c = ModelConfig {
            embed_dim: 64,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
