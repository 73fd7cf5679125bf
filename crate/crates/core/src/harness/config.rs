//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderConfig, PromptMode, PromptSharing};
use crate::error::{Error, Result};
use crate::learner::TrainConfig;
use crate::prototype::FusionStrategy;

pub const DEFAULT_SEED: u64 = 1993;
/// Seeds averaged by the comparative checks.
pub const AVERAGE_SEEDS: [u64; 5] = [1993, 1994, 1995, 1996, 1997];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Drives class order and every training stream of a run.
    pub seed: u64,
    pub data_seed: u64,
    pub pretrain_seed: u64,

    pub num_classes: usize,
    pub base_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub init_classes: usize,
    pub inc_classes: usize,

    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub seq_len: usize,
    pub ffn_mult: usize,
    pub prompt_mode: PromptMode,
    pub prompt_sharing: PromptSharing,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,

    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub prompt_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub fusion: FusionStrategy,
    /// 0 means the prompt penalty applies on every step.
    pub l2_steps: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let enc = EncoderConfig::desk(16);
        Self {
            seed: DEFAULT_SEED,
            data_seed: DEFAULT_SEED,
            pretrain_seed: DEFAULT_SEED,
            num_classes: 10,
            base_classes: 5,
            train_per_class: 100,
            test_per_class: 50,
            input_dim: enc.input_dim,
            separation: 10.0,
            init_classes: 2,
            inc_classes: 2,
            num_layers: enc.num_layers,
            num_heads: enc.num_heads,
            model_dim: enc.model_dim,
            seq_len: enc.seq_len,
            ffn_mult: enc.ffn_mult,
            prompt_mode: enc.prompt_mode,
            prompt_sharing: enc.prompt_sharing,
            pretrain_epochs: 10,
            pretrain_lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            lambda: train.lambda,
            prompt_len: train.prompt_len,
            lr: train.lr,
            weight_decay: train.weight_decay,
            fusion: train.fusion,
            l2_steps: 0,
            finetune_epochs: train.epochs,
            finetune_lr: train.lr,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

macro_rules! fields {
    ($($name:ident),* $(,)?) => {
        impl ExperimentConfig {
            /// Every recognised key, in manifest order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $(stringify!($name) => self.$name = parse(key, value)?,)*
                    other => return Err(Error::Config(format!("unknown config key {other:?}"))),
                }
                Ok(())
            }

            /// `key = value` lines that [`ExperimentConfig::parse`] reads back.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", stringify!($name), self.$name).expect("string write");)*
                out
            }
        }
    };
}

fields!(
    seed, data_seed, pretrain_seed, num_classes, base_classes, train_per_class, test_per_class, input_dim,
    separation, init_classes, inc_classes, num_layers, num_heads, model_dim, seq_len, ffn_mult, prompt_mode,
    prompt_sharing, pretrain_epochs, pretrain_lr, batch_size, epochs, lambda, prompt_len, lr, weight_decay,
    fusion, l2_steps, finetune_epochs, finetune_lr,
);

impl ExperimentConfig {
    /// Apply `key = value` lines on top of the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply(text)?;
        Ok(config)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train().validate()?;
        if self.num_classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("class and sample counts must be positive".into()));
        }
        if self.init_classes == 0 || self.inc_classes == 0 {
            return Err(Error::Config("init_classes and inc_classes must be positive".into()));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config("separation must be a finite non-negative number".into()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            seq_len: self.seq_len,
            input_dim: self.input_dim,
            ffn_mult: self.ffn_mult,
            prompt_mode: self.prompt_mode,
            prompt_sharing: self.prompt_sharing,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lambda: self.lambda,
            prompt_len: self.prompt_len,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            fusion: self.fusion,
            l2_steps: (self.l2_steps > 0).then_some(self.l2_steps),
        }
    }

    pub fn finetune(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            lr: self.finetune_lr,
            ..self.train()
        }
    }

    pub fn pretrain(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            seed: self.pretrain_seed,
            ..self.train()
        }
    }
}
