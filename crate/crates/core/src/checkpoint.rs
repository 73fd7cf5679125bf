//! `PROPCKPT` binary checkpoints.
//!
//! Layout, all integers little-endian `u32`, all values little-endian `f64`:
//!
//! ```text
//! magic      8 bytes  "PROPCKPT"
//! version    u32      currently 1
//! config     8 x u32  num_layers, num_heads, model_dim, seq_len, input_dim,
//!                     ffn_mult, prompt_mode, prompt_sharing
//! frozen     u32      0 or 1
//! count      u32      number of tensors
//! tensor*    name_len u32, name (UTF-8), rank u32, dims rank x u32,
//!            data (product of dims) x f64
//! ```
//!
//! Tensors are written in ascending name order. Besides the backbone
//! parameters a model checkpoint carries `prompt.<task>.<block>`,
//! `proto.<class>` (fused prototype) with `proto.<class>.prompted`,
//! `proto.<class>.frozen` and `proto.<class>.task`, `meta.fusion`, and for the
//! key-value baseline `key.<task>`. A pretrained backbone records the classes
//! it was trained on in `meta.base_classes`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::baselines::KeyPool;
use crate::data::ClassId;
use crate::encoder::{EncoderConfig, EncoderParams, PromptMode, PromptSharing, TaskPrompt};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::learner::{PromptPrototypeModel, TrainConfig};
use crate::prototype::{FusionStrategy, PrototypeBank, PrototypeEntry};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PROPCKPT";
pub const VERSION: u32 = 1;
const BASE_CLASSES: &str = "meta.base_classes";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub frozen: bool,
    pub tensors: BTreeMap<String, Tensor>,
}

fn sharing_code(s: PromptSharing) -> u32 {
    match s {
        PromptSharing::PerLayer => 0,
        PromptSharing::Shared => 1,
    }
}

fn sharing_from_code(c: u32) -> Result<PromptSharing> {
    match c {
        0 => Ok(PromptSharing::PerLayer),
        1 => Ok(PromptSharing::Shared),
        c => Err(Error::format("checkpoint", format!("unknown prompt sharing code {c}"))),
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format("checkpoint", format!("{what} {v} exceeds u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("checkpoint", "unexpected end of data"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn from_backbone(params: &EncoderParams) -> Self {
        Self {
            config: *params.config(),
            frozen: params.is_frozen(),
            tensors: params.tensors().clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            to_u32(c.num_layers, "num_layers")?,
            to_u32(c.num_heads, "num_heads")?,
            to_u32(c.model_dim, "model_dim")?,
            to_u32(c.seq_len, "seq_len")?,
            to_u32(c.input_dim, "input_dim")?,
            to_u32(c.ffn_mult, "ffn_mult")?,
            c.prompt_mode.code(),
            sharing_code(c.prompt_sharing),
            u32::from(self.frozen),
            to_u32(self.tensors.len(), "tensor count")?,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (name, t) in &self.tensors {
            out.extend_from_slice(&to_u32(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&to_u32(t.rank(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let mut f = [0u32; 8];
        for v in f.iter_mut() {
            *v = r.u32()?;
        }
        let config = EncoderConfig {
            num_layers: f[0] as usize,
            num_heads: f[1] as usize,
            model_dim: f[2] as usize,
            seq_len: f[3] as usize,
            input_dim: f[4] as usize,
            ffn_mult: f[5] as usize,
            prompt_mode: PromptMode::from_code(f[6])?,
            prompt_sharing: sharing_from_code(f[7])?,
        };
        config.validate().map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let frozen = match r.u32()? {
            0 => false,
            1 => true,
            v => return Err(Error::format("checkpoint", format!("frozen flag {v}"))),
        };
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= (buf.len() - r.pos) / 8)
                .ok_or_else(|| Error::format("checkpoint", format!("tensor {name} is truncated")))?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate tensor {name}")));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { config, frozen, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn is_backbone(name: &str) -> bool {
        !(name.starts_with("prompt.") || name.starts_with("proto.") || name.starts_with("key.") || name.starts_with("meta."))
    }

    pub fn with_base_classes(mut self, classes: &BTreeSet<ClassId>) -> Result<Self> {
        let t = Tensor::vector(classes.iter().map(|&c| f64::from(c)).collect())?;
        self.tensors.insert(BASE_CLASSES.into(), t);
        Ok(self)
    }

    /// Classes the backbone was pretrained on, when recorded.
    pub fn base_classes(&self) -> Option<BTreeSet<ClassId>> {
        self.tensors
            .get(BASE_CLASSES)
            .map(|t| t.data().iter().map(|&v| v as ClassId).collect())
    }

    /// Backbone parameters only; any model tensors are ignored.
    pub fn backbone(&self) -> Result<EncoderParams> {
        let tensors = self
            .tensors
            .iter()
            .filter(|(n, _)| Self::is_backbone(n))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        EncoderParams::from_tensors(self.config, tensors, self.frozen)
    }

    pub fn from_model(model: &PromptPrototypeModel, keys: Option<&KeyPool>) -> Self {
        let mut ckpt = Self::from_backbone(model.params());
        for p in model.prompts() {
            ckpt.tensors.extend(p.named());
        }
        ckpt.tensors.insert(
            "meta.fusion".into(),
            Tensor::scalar(f64::from(model.bank().fusion().code())),
        );
        for (c, e) in model.bank().entries() {
            ckpt.tensors.insert(format!("proto.{c}"), e.fused.clone());
            ckpt.tensors.insert(format!("proto.{c}.prompted"), e.prompted.clone());
            ckpt.tensors.insert(format!("proto.{c}.frozen"), e.frozen.clone());
            ckpt.tensors.insert(format!("proto.{c}.task"), Tensor::scalar(e.task_id as f64));
        }
        if let Some(keys) = keys {
            for (task, k) in keys.keys() {
                ckpt.tensors.insert(format!("key.{task}"), k.clone());
            }
        }
        ckpt
    }

    /// Rebuild the model (and key pool, when present) stored by
    /// [`Checkpoint::from_model`].
    pub fn into_model(&self, config: TrainConfig) -> Result<(PromptPrototypeModel, Option<KeyPool>)> {
        let params = self.backbone()?;
        let bad = |detail: String| Error::format("checkpoint", detail);
        let fusion = match self.tensors.get("meta.fusion") {
            Some(t) => FusionStrategy::from_code(t.data()[0] as u32)?,
            None => return Err(bad("missing meta.fusion".into())),
        };

        let mut blocks: BTreeMap<usize, BTreeMap<usize, Tensor>> = BTreeMap::new();
        let mut protos: BTreeMap<ClassId, BTreeMap<String, Tensor>> = BTreeMap::new();
        let mut keys = BTreeMap::new();
        for (name, t) in &self.tensors {
            let parts: Vec<&str> = name.split('.').collect();
            match parts.as_slice() {
                ["prompt", task, block] => {
                    let task = task.parse().map_err(|_| bad(format!("bad tensor name {name}")))?;
                    let block = block.parse().map_err(|_| bad(format!("bad tensor name {name}")))?;
                    blocks.entry(task).or_default().insert(block, t.clone());
                }
                ["proto", class, rest @ ..] => {
                    let class: ClassId = class.parse().map_err(|_| bad(format!("bad tensor name {name}")))?;
                    let field = rest.first().copied().unwrap_or("fused").to_string();
                    protos.entry(class).or_default().insert(field, t.clone());
                }
                ["key", task] => {
                    let task: usize = task.parse().map_err(|_| bad(format!("bad tensor name {name}")))?;
                    keys.insert(task, t.clone());
                }
                _ => {}
            }
        }

        let mut prompts = Vec::new();
        for (task, b) in blocks {
            if b.keys().copied().ne(0..b.len()) {
                return Err(bad(format!("prompt blocks of task {task} are not contiguous")));
            }
            prompts.push(TaskPrompt::from_blocks(task, b.into_values().collect())?);
        }

        let mut bank = PrototypeBank::new(fusion, params.config().model_dim);
        for (class, mut fields) in protos {
            let mut take = |f: &str| fields.remove(f).ok_or_else(|| bad(format!("proto.{class} lacks {f}")));
            let task = take("task")?.data()[0] as usize;
            let entry = PrototypeEntry::new(task, take("prompted")?, take("frozen")?, fusion)?;
            if entry.fused != take("fused")? {
                return Err(bad(format!("proto.{class} does not match its components")));
            }
            bank.insert(class, entry)?;
        }

        let model = PromptPrototypeModel::from_parts(params, prompts, bank, config)?;
        let keys = if keys.is_empty() { None } else { Some(KeyPool::from_keys(keys)?) };
        Ok((model, keys))
    }
}
