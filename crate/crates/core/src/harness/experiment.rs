//! End-to-end runs: data, backbone, the continual loop for one method, and
//! the artifacts written for it.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::data::{gen_synthetic, load_dataset};
use super::metrics::{run_stream, AccuracyRecord};
use super::pretrain::pretrain_backbone;
use super::stream::{make_task_stream, TaskStream};
use crate::baselines::{FinetuneModel, KvModel, NcmModel};
use crate::checkpoint::Checkpoint;
use crate::data::{ClassId, Dataset, Sample, SplitDataset};
use crate::encoder::{hex, EncoderParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::learner::{ContinualLearner, PromptPrototypeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Prop,
    Finetune,
    Kv,
    Ncm,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prop" => Ok(Method::Prop),
            "finetune" => Ok(Method::Finetune),
            "kv" => Ok(Method::Kv),
            "ncm" => Ok(Method::Ncm),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Prop => "prop",
            Method::Finetune => "finetune",
            Method::Kv => "kv",
            Method::Ncm => "ncm",
        })
    }
}

/// Stream data and the disjoint base-class training data for pretraining.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub stream: SplitDataset,
    pub base: Vec<Sample>,
    pub hash: String,
}

/// Synthetic data from the config, or a dataset directory. The
/// `base_classes` highest class ids are held out for pretraining.
pub fn prepare_data(config: &ExperimentConfig, data_dir: Option<&Path>) -> Result<PreparedData> {
    let all = match data_dir {
        Some(dir) => load_dataset(dir)?,
        None => gen_synthetic(
            config.num_classes + config.base_classes,
            config.train_per_class + config.test_per_class,
            config.input_dim,
            config.separation,
            config.data_seed,
        )?,
    };
    if all.feature_dim()? != config.input_dim {
        return Err(Error::Config(format!(
            "data has {} features but input_dim is {}",
            all.feature_dim()?,
            config.input_dim
        )));
    }
    let hash = dataset_hash(&all);
    let classes: Vec<ClassId> = all.classes().into_iter().collect();
    if classes.len() <= config.base_classes {
        return Err(Error::Config(format!(
            "{} classes leave none for the stream after {} base classes",
            classes.len(),
            config.base_classes
        )));
    }
    let cut = classes.len() - config.base_classes;
    let stream_classes: BTreeSet<ClassId> = classes[..cut].iter().copied().collect();
    let base_classes: BTreeSet<ClassId> = classes[cut..].iter().copied().collect();
    let split = SplitDataset::split(all, config.test_per_class)?;
    Ok(PreparedData {
        stream: split.filter_classes(&stream_classes),
        base: split.train.filter_classes(&base_classes).samples,
        hash,
    })
}

pub fn dataset_hash(data: &Dataset) -> String {
    let mut h = Sha256::new();
    for s in &data.samples {
        h.update((s.id as u64).to_le_bytes());
        h.update(s.y.to_le_bytes());
        for v in &s.x {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// A frozen backbone: loaded from `checkpoint`, or pretrained on `data.base`.
/// A checkpoint pretrained on any stream class is a protocol violation.
pub fn obtain_backbone(config: &ExperimentConfig, data: &PreparedData, checkpoint: Option<&Path>) -> Result<EncoderParams> {
    match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != config.encoder() {
                return Err(Error::Config(format!(
                    "checkpoint encoder {:?} does not match the configured {:?}",
                    ckpt.config,
                    config.encoder()
                )));
            }
            if let Some(base) = ckpt.base_classes() {
                if let Some(c) = base.intersection(&data.stream.classes()).next() {
                    return Err(Error::Protocol(format!(
                        "class {c} was used to pretrain the checkpoint and is also in the task stream"
                    )));
                }
            }
            let mut params = ckpt.backbone()?;
            params.freeze();
            Ok(params)
        }
        None => {
            let p = pretrain_backbone(&data.base, &data.stream.classes(), config.encoder(), &config.pretrain())?;
            log::info!("pretrained backbone, base train accuracy {:.4}", p.train_accuracy);
            Ok(p.params)
        }
    }
}

/// A trained model of any method.
#[derive(Debug, Clone)]
pub enum Trained {
    Prop(PromptPrototypeModel),
    Kv(KvModel),
    Finetune(FinetuneModel),
    Ncm(NcmModel),
}

impl Trained {
    pub fn checkpoint(&self) -> Option<Checkpoint> {
        match self {
            Trained::Prop(m) => Some(Checkpoint::from_model(m, None)),
            Trained::Kv(m) => Some(Checkpoint::from_model(m.inner(), Some(m.keys()))),
            Trained::Finetune(m) => Some(Checkpoint::from_backbone(m.params())),
            Trained::Ncm(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: Method,
    pub record: AccuracyRecord,
    /// Share of final-step test points whose retrieved task is their own
    /// (key-value baseline only).
    pub retrieval_accuracy: Option<f64>,
    pub backbone_hash: String,
    pub model: Trained,
}

fn run_learner<L: ContinualLearner>(mut learner: L, stream: &TaskStream) -> Result<(L, AccuracyRecord)> {
    let record = run_stream(&mut learner, &stream.tasks, |_, _| Ok(()))?;
    Ok((learner, record))
}

/// Run `method` over `stream` starting from the frozen `backbone`.
pub fn run_method(config: &ExperimentConfig, method: Method, stream: &TaskStream, backbone: &EncoderParams) -> Result<RunOutput> {
    if !backbone.is_frozen() {
        return Err(Error::Contract("experiments start from a frozen backbone".into()));
    }
    let hash = backbone.content_hash();
    let train = config.train();
    let (model, record, retrieval) = match method {
        Method::Prop => {
            let (m, r) = run_learner(PromptPrototypeModel::new(backbone.clone(), train)?, stream)?;
            (Trained::Prop(m), r, None)
        }
        Method::Kv => {
            let (m, r) = run_learner(KvModel::new(backbone.clone(), train)?, stream)?;
            let mut hits = 0usize;
            let mut total = 0usize;
            for (t, task) in stream.tasks.iter().enumerate() {
                for s in &task.test {
                    hits += usize::from(m.predict(&s.x)?.selected_task == t);
                    total += 1;
                }
            }
            let acc = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
            (Trained::Kv(m), r, Some(acc))
        }
        Method::Finetune => {
            let (m, r) = run_learner(FinetuneModel::new(backbone, config.finetune())?, stream)?;
            (Trained::Finetune(m), r, None)
        }
        Method::Ncm => {
            let (m, r) = run_learner(NcmModel::new(backbone.clone())?, stream)?;
            (Trained::Ncm(m), r, None)
        }
    };
    let after = match &model {
        Trained::Prop(m) => Some(m.params()),
        Trained::Kv(m) => Some(m.inner().params()),
        Trained::Finetune(_) => None,
        Trained::Ncm(_) => None,
    };
    if let Some(p) = after {
        if p.content_hash() != hash {
            return Err(Error::Protocol("the frozen backbone changed during the run".into()));
        }
    }
    Ok(RunOutput {
        method,
        record,
        retrieval_accuracy: retrieval,
        backbone_hash: hash,
        model,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Prepare data and backbone, run, and write `metrics.csv`, the checkpoint
/// and `manifest.txt` into `out_dir` when given.
pub fn run_experiment(config: &ExperimentConfig, method: Method, opts: &RunOptions) -> Result<RunOutput> {
    config.validate()?;
    let data = prepare_data(config, opts.data_dir.as_deref())?;
    let backbone = obtain_backbone(config, &data, opts.checkpoint.as_deref())?;
    let stream = make_task_stream(&data.stream, config.init_classes, config.inc_classes, config.seed)?;
    let out = run_method(config, method, &stream, &backbone)?;
    if let Some(dir) = &opts.out_dir {
        write_run_artifacts(dir, config, &out, &stream, &data.hash)?;
    }
    Ok(out)
}

pub fn checkpoint_name(method: Method) -> String {
    format!("{method}.ckpt")
}

pub fn write_run_artifacts(
    dir: &Path,
    config: &ExperimentConfig,
    out: &RunOutput,
    stream: &TaskStream,
    data_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let metrics = out.record.to_csv();
    write_atomic(&dir.join("metrics.csv"), metrics.as_bytes())?;

    let mut manifest = format!("method = {}\n", out.method);
    manifest.push_str(&config.to_text());
    manifest.push_str(&format!("tasks = {}\n", stream.len()));
    let order: Vec<String> = stream
        .tasks
        .iter()
        .map(|t| t.classes.iter().map(u32::to_string).collect::<Vec<_>>().join(" "))
        .collect();
    manifest.push_str(&format!("class_order = {}\n", order.join(" | ")));
    let dropped: Vec<String> = stream.dropped.iter().map(u32::to_string).collect();
    manifest.push_str(&format!("dropped_classes = {}\n", dropped.join(" ")));
    manifest.push_str(&format!("data_sha256 = {data_hash}\n"));
    manifest.push_str(&format!("backbone_sha256 = {}\n", out.backbone_hash));
    manifest.push_str(&format!("metrics_sha256 = {}\n", sha256_hex(metrics.as_bytes())));
    if let Some(ckpt) = out.model.checkpoint() {
        let bytes = ckpt.to_bytes()?;
        let name = checkpoint_name(out.method);
        write_atomic(&dir.join(&name), &bytes)?;
        manifest.push_str(&format!("checkpoint = {name}\ncheckpoint_sha256 = {}\n", sha256_hex(&bytes)));
    }
    if let (Some(l), Some(a)) = (out.record.final_last(), out.record.final_avg()) {
        manifest.push_str(&format!("final_last = {l:.6}\nfinal_avg = {a:.6}\n"));
    }
    if let Some(r) = out.retrieval_accuracy {
        manifest.push_str(&format!("retrieval_accuracy = {r:.6}\n"));
    }
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
}
