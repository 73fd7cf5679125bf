//! A small pre-norm transformer encoder with prompt-augmented attention.
//!
//! Raw feature vectors are mapped to `seq_len - 1` content tokens by a fixed
//! random projection (the tokenizer), a learnable class token is prepended,
//! and the final class-token row is the feature readout. A task prompt adds
//! `prompt_len` extra rows to the attention input of every layer; the
//! attention output keeps only the first `seq_len` rows, so the hidden state
//! never changes shape.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TOKENIZER: &str = "tokenizer.proj";
pub const CLS_TOKEN: &str = "embed.cls";

/// How a prompt block enters self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptMode {
    /// Prompt rows join queries, keys and values; output is truncated to the
    /// hidden rows.
    #[default]
    Concat,
    /// Prompt rows join keys and values only.
    Prefix,
    /// Prompt positions are masked out of every attention row, so prompts have
    /// no effect. Used to pin down degenerate equalities in tests.
    Masked,
}

impl PromptMode {
    pub fn code(self) -> u32 {
        match self {
            PromptMode::Concat => 0,
            PromptMode::Prefix => 1,
            PromptMode::Masked => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(PromptMode::Concat),
            1 => Ok(PromptMode::Prefix),
            2 => Ok(PromptMode::Masked),
            c => Err(Error::format("prompt mode", format!("unknown code {c}"))),
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(PromptMode::Concat),
            "prefix" => Ok(PromptMode::Prefix),
            "masked" => Ok(PromptMode::Masked),
            other => Err(Error::Config(format!("unknown prompt mode {other:?}"))),
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::Concat => "concat",
            PromptMode::Prefix => "prefix",
            PromptMode::Masked => "masked",
        })
    }
}

/// Whether each layer gets its own prompt block or all layers share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptSharing {
    #[default]
    PerLayer,
    Shared,
}

impl std::str::FromStr for PromptSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_layer" => Ok(PromptSharing::PerLayer),
            "shared" => Ok(PromptSharing::Shared),
            other => Err(Error::Config(format!("unknown prompt sharing {other:?}"))),
        }
    }
}

impl fmt::Display for PromptSharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptSharing::PerLayer => "per_layer",
            PromptSharing::Shared => "shared",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    /// Hidden sequence length including the class token.
    pub seq_len: usize,
    /// Width of the raw feature vectors fed to the tokenizer.
    pub input_dim: usize,
    pub ffn_mult: usize,
    pub prompt_mode: PromptMode,
    pub prompt_sharing: PromptSharing,
}

impl EncoderConfig {
    pub fn desk(input_dim: usize) -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            seq_len: 8,
            input_dim,
            ffn_mult: 4,
            prompt_mode: PromptMode::Concat,
            prompt_sharing: PromptSharing::PerLayer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("input_dim", self.input_dim),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must leave room for a content token".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn content_tokens(&self) -> usize {
        self.seq_len - 1
    }

    /// Number of distinct prompt blocks a task prompt carries.
    pub fn prompt_blocks(&self) -> usize {
        match self.prompt_sharing {
            PromptSharing::PerLayer => self.num_layers,
            PromptSharing::Shared => 1,
        }
    }
}

/// Backbone weights, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: BTreeMap<String, Tensor>,
    frozen: bool,
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("layer{layer}.{part}")
}

/// Every backbone parameter name with its shape.
fn parameter_shapes(config: &EncoderConfig) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    let d = config.model_dim;
    let hidden = d * config.ffn_mult;
    let mut out = vec![
        (TOKENIZER.to_string(), vec![config.input_dim, config.content_tokens() * d]),
        (CLS_TOKEN.to_string(), vec![d]),
    ];
    for l in 0..config.num_layers {
        for ln in ["ln1", "ln2"] {
            out.push((layer_name(l, &format!("{ln}.gamma")), vec![d]));
            out.push((layer_name(l, &format!("{ln}.beta")), vec![d]));
        }
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            out.push((layer_name(l, w), vec![d, d]));
        }
        out.push((layer_name(l, "ffn.w1"), vec![d, hidden]));
        out.push((layer_name(l, "ffn.b1"), vec![hidden]));
        out.push((layer_name(l, "ffn.w2"), vec![hidden, d]));
        out.push((layer_name(l, "ffn.b2"), vec![d]));
    }
    out.push(("final_ln.gamma".to_string(), vec![d]));
    out.push(("final_ln.beta".to_string(), vec![d]));
    Ok(out)
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, shape) in parameter_shapes(&config)? {
            let t = if name.ends_with(".gamma") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".beta") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else if name == CLS_TOKEN {
                Tensor::randn(&shape, 0.02, rng)
            } else {
                Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), rng)
            };
            tensors.insert(name, t);
        }
        Ok(Self {
            config,
            tensors,
            frozen: false,
        })
    }

    /// Rebuild from named tensors, checking every expected name and shape.
    pub fn from_tensors(
        config: EncoderConfig,
        mut tensors: BTreeMap<String, Tensor>,
        frozen: bool,
    ) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (name, shape) in parameter_shapes(&config)? {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::format("encoder parameters", format!("missing {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(
                    "encoder parameters",
                    format!("{name}: shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            out.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::format("encoder parameters", format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            config,
            tensors: out,
            frozen,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// A trainable copy, e.g. for full finetuning.
    pub fn unfrozen(&self) -> Self {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    /// Names that gradient training may update. The tokenizer is fixed.
    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str).filter(|n| *n != TOKENIZER)
    }

    /// Replace trainable tensors after an optimizer step.
    pub fn update(&mut self, updated: &BTreeMap<String, Tensor>) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract("attempt to update a frozen backbone".into()));
        }
        for (name, t) in updated {
            if name == TOKENIZER {
                return Err(Error::Contract("the tokenizer projection is fixed".into()));
            }
            let slot = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown backbone parameter {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::dim("update", name.clone()));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// SHA-256 over every parameter name, shape and value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Content tokens for a raw feature vector, as a `(seq_len - 1) x D` matrix.
    pub fn tokenize(&self, x: &[f64]) -> Result<Tensor> {
        let c = &self.config;
        if x.len() != c.input_dim {
            return Err(Error::dim(
                "tokenize",
                format!("feature width {} but encoder expects {}", x.len(), c.input_dim),
            ));
        }
        let row = Tensor::matrix(1, x.len(), x.to_vec())?;
        row.matmul(&self.tensors[TOKENIZER])?
            .reshape(vec![c.content_tokens(), c.model_dim])
    }

    /// Register every weight on `tape`. With `trainable` false they are
    /// constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundEncoder> {
        if trainable && self.frozen {
            return Err(Error::Contract("cannot train a frozen backbone".into()));
        }
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable && name != TOKENIZER {
                tape.param(name.clone(), t.clone())?
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Ok(BoundEncoder {
            config: self.config,
            vars,
        })
    }

    /// Feature vector of `x`, with or without a task prompt.
    pub fn encode(&self, x: &[f64], prompt: Option<&TaskPrompt>) -> Result<Tensor> {
        self.encode_counted(x, prompt).map(|(f, _)| f)
    }

    /// Like [`EncoderParams::encode`], also returning the attention
    /// multiply-accumulates executed.
    pub fn encode_counted(&self, x: &[f64], prompt: Option<&TaskPrompt>) -> Result<(Tensor, u64)> {
        let mut tape = Tape::new();
        let enc = self.bind(&mut tape, false)?;
        let blocks = match prompt {
            Some(p) => Some(p.bind(&mut tape, &self.config, false)?),
            None => None,
        };
        let tokens = self.tokenize(x)?;
        let out = enc.forward(&mut tape, &tokens, blocks.as_deref())?;
        let feature = tape.value(out).flatten();
        Ok((feature, tape.attention_macs()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Encoder weights registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    config: EncoderConfig,
    vars: BTreeMap<String, Var>,
}

impl BoundEncoder {
    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn layer(&self, l: usize) -> LayerVars {
        let v = |part: &str| self.vars[&layer_name(l, part)];
        LayerVars {
            ln1: (v("ln1.gamma"), v("ln1.beta")),
            ln2: (v("ln2.gamma"), v("ln2.beta")),
            wq: v("attn.wq"),
            wk: v("attn.wk"),
            wv: v("attn.wv"),
            wo: v("attn.wo"),
            w1: v("ffn.w1"),
            b1: v("ffn.b1"),
            w2: v("ffn.w2"),
            b2: v("ffn.b2"),
        }
    }

    /// Run the encoder on pre-computed content tokens and return the
    /// `1 x D` class-token feature. `prompt` holds one block per layer, or a
    /// single block shared by all layers.
    pub fn forward(&self, tape: &mut Tape, tokens: &Tensor, prompt: Option<&[Var]>) -> Result<Var> {
        let c = &self.config;
        if tokens.rows() != c.content_tokens() || tokens.cols() != c.model_dim {
            return Err(Error::dim(
                "encode",
                format!(
                    "{:?} tokens, expected {}x{}",
                    tokens.shape(),
                    c.content_tokens(),
                    c.model_dim
                ),
            ));
        }
        if let Some(blocks) = prompt {
            if blocks.len() != 1 && blocks.len() != c.num_layers {
                return Err(Error::dim(
                    "encode",
                    format!("{} prompt blocks for {} layers", blocks.len(), c.num_layers),
                ));
            }
        }
        let content = tape.constant(tokens.clone());
        let mut h = tape.concat_rows(&[self.var(CLS_TOKEN), content])?;

        for l in 0..c.num_layers {
            let lv = self.layer(l);
            let p = prompt.map(|blocks| if blocks.len() == 1 { blocks[0] } else { blocks[l] });
            let a = tape.layer_norm(h, lv.ln1.0, lv.ln1.1)?;
            let attn = multi_head_attention(tape, a, p, &lv, c)?;
            h = tape.add(h, attn)?;
            let b = tape.layer_norm(h, lv.ln2.0, lv.ln2.1)?;
            let f = tape.matmul(b, lv.w1)?;
            let f = tape.add_row_bias(f, lv.b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, lv.w2)?;
            let f = tape.add_row_bias(f, lv.b2)?;
            h = tape.add(h, f)?;
        }
        let out = tape.layer_norm(h, self.var("final_ln.gamma"), self.var("final_ln.beta"))?;
        tape.slice_rows(out, 0, 1)
    }
}

/// Weights of one attention layer on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `MSA([h; p], [h; p], [h; p])` restricted to the first `rows(h)` outputs.
pub(crate) fn multi_head_attention(
    tape: &mut Tape,
    h: Var,
    prompt: Option<Var>,
    w: &LayerVars,
    config: &EncoderConfig,
) -> Result<Var> {
    let hidden_rows = tape.value(h).rows();
    let width = tape.value(h).cols();
    if let Some(p) = prompt {
        if tape.value(p).cols() != width {
            return Err(Error::dim(
                "attention_with_prompt",
                format!("prompt width {} vs hidden width {width}", tape.value(p).cols()),
            ));
        }
    }
    let (kv_in, q_in) = match (prompt, config.prompt_mode) {
        (Some(p), PromptMode::Concat) => {
            let joined = tape.concat_rows(&[h, p])?;
            (joined, joined)
        }
        (Some(p), PromptMode::Prefix) => (tape.concat_rows(&[h, p])?, h),
        (None, _) | (Some(_), PromptMode::Masked) => (h, h),
    };
    let q = tape.matmul(q_in, w.wq)?;
    let k = tape.matmul(kv_in, w.wk)?;
    let v = tape.matmul(kv_in, w.wv)?;
    let dh = config.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.num_heads);
    for i in 0..config.num_heads {
        let qh = tape.slice_cols(q, i * dh, dh)?;
        let kh = tape.slice_cols(k, i * dh, dh)?;
        let vh = tape.slice_cols(v, i * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.attention_matmul(qh, kt)?;
        let scores = tape.scale(scores, inv_sqrt);
        let weights = tape.softmax_rows(scores)?;
        heads.push(tape.attention_matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let out = tape.matmul(merged, w.wo)?;
    if tape.value(out).rows() == hidden_rows {
        Ok(out)
    } else {
        tape.slice_rows(out, 0, hidden_rows)
    }
}

/// Prompt-augmented self-attention of one layer of `params` on a hidden
/// state `h` (`seq_len x D`). Returns a tensor of the same shape as `h`.
pub fn attention_with_prompt(
    h: &Tensor,
    prompt: Option<&Tensor>,
    params: &EncoderParams,
    layer: usize,
) -> Result<Tensor> {
    let c = params.config();
    if layer >= c.num_layers {
        return Err(Error::Config(format!("layer {layer} of {}", c.num_layers)));
    }
    if h.rank() != 2 || h.cols() != c.model_dim {
        return Err(Error::dim("attention_with_prompt", format!("hidden {:?}", h.shape())));
    }
    let mut tape = Tape::new();
    let enc = params.bind(&mut tape, false)?;
    let hv = tape.constant(h.clone());
    let pv = match prompt {
        Some(p) => {
            if p.rank() != 2 || p.cols() != c.model_dim {
                return Err(Error::dim(
                    "attention_with_prompt",
                    format!("prompt {:?} for width {}", p.shape(), c.model_dim),
                ));
            }
            Some(tape.constant(p.clone()))
        }
        None => None,
    };
    let out = multi_head_attention(&mut tape, hv, pv, &enc.layer(layer), c)?;
    Ok(tape.value(out).clone())
}

/// Learnable prompt of one task: a `prompt_len x D` block per layer (or one
/// shared block).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrompt {
    pub task_id: usize,
    blocks: Vec<Tensor>,
}

pub const PROMPT_INIT_STD: f64 = 0.02;

impl TaskPrompt {
    pub fn init<R: Rng + ?Sized>(
        task_id: usize,
        config: &EncoderConfig,
        prompt_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::Config("prompt_len must be positive".into()));
        }
        let blocks = (0..config.prompt_blocks())
            .map(|_| Tensor::randn(&[prompt_len, config.model_dim], PROMPT_INIT_STD, rng))
            .collect();
        Ok(Self { task_id, blocks })
    }

    pub fn zeros(task_id: usize, config: &EncoderConfig, prompt_len: usize) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::Config("prompt_len must be positive".into()));
        }
        let blocks = (0..config.prompt_blocks())
            .map(|_| Tensor::zeros(&[prompt_len, config.model_dim]))
            .collect();
        Ok(Self { task_id, blocks })
    }

    pub fn from_blocks(task_id: usize, blocks: Vec<Tensor>) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| Error::Contract("prompt without blocks".into()))?;
        if first.rank() != 2 || blocks.iter().any(|b| b.shape() != first.shape()) {
            return Err(Error::dim("task prompt", "blocks must share one L_p x D shape"));
        }
        if blocks.iter().any(|b| !b.all_finite()) {
            return Err(Error::NonFinite("task prompt"));
        }
        Ok(Self { task_id, blocks })
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn prompt_len(&self) -> usize {
        self.blocks[0].rows()
    }

    pub fn param_name(task_id: usize, block: usize) -> String {
        format!("prompt.{task_id}.{block}")
    }

    /// Register the blocks on `tape`, as parameters when `trainable`.
    pub fn bind(&self, tape: &mut Tape, config: &EncoderConfig, trainable: bool) -> Result<Vec<Var>> {
        let expected = config.prompt_blocks();
        if self.blocks.len() != expected {
            return Err(Error::dim(
                "task prompt",
                format!("{} blocks, encoder expects {expected}", self.blocks.len()),
            ));
        }
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if b.cols() != config.model_dim {
                    return Err(Error::dim(
                        "task prompt",
                        format!("width {} vs model_dim {}", b.cols(), config.model_dim),
                    ));
                }
                if trainable {
                    tape.param(Self::param_name(self.task_id, i), b.clone())
                } else {
                    Ok(tape.constant(b.clone()))
                }
            })
            .collect()
    }

    /// Overwrite blocks from a name-keyed map produced by an optimizer.
    pub fn update(&mut self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let name = Self::param_name(self.task_id, i);
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("missing prompt parameter {name}")))?;
            *block = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (Self::param_name(self.task_id, i), b.clone()))
            .collect()
    }
}
