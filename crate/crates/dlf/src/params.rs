//! Named parameters, freezing by group, and the checkpoint file.
//!
//! A checkpoint is a single safetensors file. Tensor names are the parameter
//! paths (`semantic.enc.0.attn.qkv.weight`, ...); optimizer moments, when
//! present, live under `optim.m.<path>` / `optim.v.<path>`. The safetensors
//! metadata map carries the manifest described by [`Manifest`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DlfError, Result};

/// Checkpoint format version written into every manifest.
pub const CHECKPOINT_FORMAT: &str = "dlf-checkpoint-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// Patch embedding, semantic encoder/decoder and the semantic codebook.
    Semantic,
    Detail,
    Interactive,
    Adaptor,
    Generator,
    Auxiliary,
    Entropy,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Semantic,
        ParamGroup::Detail,
        ParamGroup::Interactive,
        ParamGroup::Adaptor,
        ParamGroup::Generator,
        ParamGroup::Auxiliary,
        ParamGroup::Entropy,
        ParamGroup::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Semantic => "semantic",
            ParamGroup::Detail => "detail",
            ParamGroup::Interactive => "interactive",
            ParamGroup::Adaptor => "adaptor",
            ParamGroup::Generator => "generator",
            ParamGroup::Auxiliary => "auxiliary",
            ParamGroup::Entropy => "entropy",
            ParamGroup::Discriminator => "discriminator",
        }
    }
}

/// A trainable tensor. Reading it through [`Param::t`] yields a detached copy
/// while its group is frozen, so no gradient can reach it.
#[derive(Clone)]
pub struct Param {
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl Param {
    pub fn t(&self) -> Tensor {
        if self.frozen.load(Ordering::Relaxed) {
            self.var.as_detached_tensor()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }
}

struct Entry {
    var: Var,
    group: ParamGroup,
}

pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    flags: HashMap<ParamGroup, Arc<AtomicBool>>,
    device: Device,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        let flags = ParamGroup::ALL
            .iter()
            .map(|&g| (g, Arc::new(AtomicBool::new(false))))
            .collect();
        Self {
            entries: BTreeMap::new(),
            flags,
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn set_frozen(&self, group: ParamGroup, frozen: bool) {
        self.flags[&group].store(frozen, Ordering::Relaxed);
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.flags[&group].load(Ordering::Relaxed)
    }

    pub fn freeze_only(&self, frozen: &[ParamGroup]) {
        for g in ParamGroup::ALL {
            self.set_frozen(g, frozen.contains(&g));
        }
    }

    fn insert(&mut self, name: String, tensor: Tensor, group: ParamGroup) -> Result<Param> {
        if self.entries.contains_key(&name) {
            return Err(DlfError::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        self.entries.insert(
            name,
            Entry {
                var: var.clone(),
                group,
            },
        );
        Ok(Param {
            var,
            frozen: self.flags[&group].clone(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.entries.get(name).map(|e| e.group)
    }

    /// `(name, var)` of every parameter whose group is not frozen.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| !self.is_frozen(e.group))
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn in_group(&self, group: ParamGroup) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.group == group)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn all(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    /// Serializes parameters plus `extra` tensors with a manifest.
    pub fn to_safetensors(&self, manifest: &Manifest, extra: &[(String, Tensor)]) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Tensor)> = self
            .entries
            .iter()
            .map(|(n, e)| (n.clone(), e.var.as_tensor().clone()))
            .collect();
        tensors.extend(extra.iter().cloned());
        let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), None)?;
        Ok(with_metadata(&bytes, &manifest.to_map()))
    }

    /// Overwrites the parameters of `groups` from a checkpoint; every one of
    /// them must be present with the model's shape. Names listed in
    /// `optional` are skipped when absent or mis-shaped.
    pub fn load_groups(&self, ckpt: &Checkpoint, groups: &[ParamGroup], optional: &[&str]) -> Result<()> {
        for (name, entry) in self.entries.iter().filter(|(_, e)| groups.contains(&e.group)) {
            let t = match ckpt.tensors.get(name) {
                Some(t) if t.dims() == entry.var.dims() => t,
                _ if optional.contains(&name.as_str()) => continue,
                Some(t) => {
                    return Err(DlfError::CheckpointMismatch(format!(
                        "parameter {name} has shape {:?} in checkpoint, model expects {:?}",
                        t.dims(),
                        entry.var.dims()
                    )))
                }
                None => return Err(DlfError::CheckpointMismatch(format!("checkpoint lacks parameter {name}"))),
            };
            entry.var.set(t)?;
        }
        Ok(())
    }

    /// Overwrites every parameter from a loaded checkpoint. Missing or
    /// mis-shaped tensors are errors; unknown tensors are returned.
    pub fn load_from(&self, ckpt: &Checkpoint) -> Result<Vec<String>> {
        for (name, entry) in &self.entries {
            let t = ckpt
                .tensors
                .get(name)
                .ok_or_else(|| DlfError::CheckpointMismatch(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != entry.var.dims() {
                return Err(DlfError::CheckpointMismatch(format!(
                    "parameter {name} has shape {:?} in checkpoint, model expects {:?}",
                    t.dims(),
                    entry.var.dims()
                )));
            }
            entry.var.set(t)?;
        }
        Ok(ckpt
            .tensors
            .keys()
            .filter(|k| !self.entries.contains_key(*k))
            .cloned()
            .collect())
    }
}

/// Seeded initializer that registers parameters under a dotted prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            group,
        }
    }

    pub fn pp(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            group: self.group,
        }
    }

    pub fn group(&mut self, group: ParamGroup) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix: self.prefix.clone(),
            group,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Param> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std as f32).map_err(|e| DlfError::Config(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.store.device)?;
        let full = self.full_name(name);
        self.store.insert(full, t, self.group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Param> {
        let t = Tensor::full(value as f32, shape, &self.store.device)?;
        let full = self.full_name(name);
        self.store.insert(full, t, self.group)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Param> {
        self.constant(name, shape, 0.0)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn json_string(s: &str) -> String {
    let mut out = String::from("\"");
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Inserts `__metadata__` with sorted keys into a safetensors buffer, so
/// that equal checkpoints serialize to equal bytes.
fn with_metadata(bytes: &[u8], meta: &HashMap<String, String>) -> Vec<u8> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte length prefix")) as usize;
    let header = std::str::from_utf8(&bytes[8..8 + n]).expect("safetensors header is UTF-8").trim_end();
    let sorted: std::collections::BTreeMap<_, _> = meta.iter().collect();
    let fields: Vec<String> = sorted
        .into_iter()
        .map(|(k, v)| format!("{}:{}", json_string(k), json_string(v)))
        .collect();
    let rest = &header[1..];
    let sep = if rest.trim_start().starts_with('}') { "" } else { "," };
    let mut h = format!("{{\"__metadata__\":{{{}}}{sep}{rest}", fields.join(","));
    while h.len() % 8 != 0 {
        h.push(' ');
    }
    let mut out = Vec::with_capacity(8 + h.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(h.as_bytes());
    out.extend_from_slice(&bytes[8 + n..]);
    out
}

/// Manifest stored in the checkpoint metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub stage: u8,
    pub lambda_index: u8,
    pub codebook_size: u32,
    pub variant: String,
    pub step: u64,
    /// Model configuration in `key=value` lines.
    pub model_config: String,
}

impl Manifest {
    fn to_map(&self) -> HashMap<String, String> {
        HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("config_hash".to_string(), self.config_hash.clone()),
            ("stage".to_string(), self.stage.to_string()),
            ("lambda_index".to_string(), self.lambda_index.to_string()),
            ("codebook_size".to_string(), self.codebook_size.to_string()),
            ("variant".to_string(), self.variant.clone()),
            ("step".to_string(), self.step.to_string()),
            ("model_config".to_string(), self.model_config.clone()),
        ])
    }

    fn from_map(map: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| DlfError::CheckpointMismatch(format!("manifest lacks {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| DlfError::CheckpointMismatch(format!("manifest field {k} is not a number")))
        };
        let format = get("format")?;
        if format != CHECKPOINT_FORMAT {
            return Err(DlfError::CheckpointMismatch(format!("unsupported checkpoint format {format}")));
        }
        Ok(Self {
            config_hash: get("config_hash")?,
            stage: num("stage")? as u8,
            lambda_index: num("lambda_index")? as u8,
            codebook_size: num("codebook_size")? as u32,
            variant: get("variant")?,
            step: num("step")?,
            model_config: get("model_config")?,
        })
    }
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        use candle_core::safetensors::Load;
        let st = safetensors::SafeTensors::deserialize(bytes)?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)?;
        let manifest = Manifest::from_map(
            meta.metadata()
                .as_ref()
                .ok_or_else(|| DlfError::CheckpointMismatch("checkpoint has no manifest".into()))?,
        )?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            let t = view.load(device)?.to_dtype(DType::F32)?;
            tensors.insert(name, t);
        }
        Ok(Self { manifest, tensors })
    }

    pub fn read(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DlfError::io(path, e))?;
        Self::from_bytes(&bytes, device)
    }
}
