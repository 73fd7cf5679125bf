//! Per-task prompt training, prototype extraction and task-agnostic
//! prediction.
//!
//! For every task a fresh prompt and a temporary linear head are trained on
//! cross-entropy plus the prompt-norm penalty. The head is then dropped: the
//! class prototypes computed with and without the prompt become the
//! classifier. At inference an input is encoded under every task's prompt
//! and compared only with the prototypes of that same task.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape};
use crate::data::{ClassId, Sample, Task};
use crate::encoder::{EncoderParams, TaskPrompt};
use crate::error::{Error, Result};
use crate::loss::{self, LossReport};
use crate::optim::SgdCosine;
use crate::prototype::{class_prototype, fuse, similarity_scores, FusionStrategy, PrototypeBank, PrototypeEntry};
use crate::tensor::Tensor;

pub const HEAD_WEIGHT: &str = "head.w";
pub const HEAD_BIAS: &str = "head.b";
pub const HEAD_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub prompt_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub fusion: FusionStrategy,
    /// Apply the prompt-norm penalty only during the first k optimizer steps.
    pub l2_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 20,
            lambda: loss::DEFAULT_LAMBDA,
            prompt_len: 5,
            lr: SgdCosine::DEFAULT_LR,
            weight_decay: SgdCosine::DEFAULT_WEIGHT_DECAY,
            seed: 1993,
            fusion: FusionStrategy::Concatenate,
            l2_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.prompt_len == 0 {
            return Err(Error::Config("batch_size and prompt_len must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lambda, lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Independent, reproducible random stream for one task of one run.
pub fn task_rng(seed: u64, task_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task_id as u64 + 1);
    rng
}

/// What training one task produced.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub prompt: TaskPrompt,
    /// New bank entries, one per class of the task.
    pub entries: Vec<(ClassId, PrototypeEntry)>,
    /// Mean objective per epoch.
    pub epoch_losses: Vec<f64>,
    pub last_report: Option<LossReport>,
    /// Accuracy of the temporary head on the task's training data.
    pub train_accuracy: f64,
}

/// Per-class `(prompted, frozen)` prototype pairs over `samples`.
pub fn dual_prototypes(
    params: &EncoderParams,
    prompt: &TaskPrompt,
    samples: &[Sample],
    classes: &[ClassId],
) -> Result<BTreeMap<ClassId, (Tensor, Tensor)>> {
    let (prompted, frozen) = encode_both(params, prompt, samples)?;
    pair_prototypes(samples, classes, &prompted, &frozen)
}

fn encode_both(
    params: &EncoderParams,
    prompt: &TaskPrompt,
    samples: &[Sample],
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut prompted = Vec::with_capacity(samples.len());
    let mut frozen = Vec::with_capacity(samples.len());
    for s in samples {
        prompted.push(params.encode(&s.x, Some(prompt))?);
        frozen.push(params.encode(&s.x, None)?);
    }
    Ok((prompted, frozen))
}

fn pair_prototypes(
    samples: &[Sample],
    classes: &[ClassId],
    prompted: &[Tensor],
    frozen: &[Tensor],
) -> Result<BTreeMap<ClassId, (Tensor, Tensor)>> {
    let mut out = BTreeMap::new();
    for &c in classes {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].y == c).collect();
        let p: Vec<Tensor> = idx.iter().map(|&i| prompted[i].clone()).collect();
        let f: Vec<Tensor> = idx.iter().map(|&i| frozen[i].clone()).collect();
        out.insert(c, (class_prototype(c, &p)?, class_prototype(c, &f)?));
    }
    Ok(out)
}

/// Cross-entropy of the temporary head plus `lambda` times the prompt
/// penalty on one batch, with gradients for the prompt blocks and the head
/// (`HEAD_WEIGHT`, `HEAD_BIAS`).
pub fn objective(
    params: &EncoderParams,
    prompt: &TaskPrompt,
    head: &BTreeMap<String, Tensor>,
    tokens: &[&Tensor],
    labels: &[usize],
    lambda: f64,
) -> Result<(LossReport, Gradients)> {
    let head_tensor = |name: &str| {
        head.get(name)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("head is missing {name}")))
    };
    let config = *params.config();
    let mut tape = Tape::new();
    let enc = params.bind(&mut tape, false)?;
    let blocks = prompt.bind(&mut tape, &config, true)?;
    let w = tape.param(HEAD_WEIGHT, head_tensor(HEAD_WEIGHT)?)?;
    let b = tape.param(HEAD_BIAS, head_tensor(HEAD_BIAS)?)?;
    let feats = tokens
        .iter()
        .map(|t| enc.forward(&mut tape, t, Some(&blocks)))
        .collect::<Result<Vec<_>>>()?;
    let feats = tape.concat_rows(&feats)?;
    let logits = tape.matmul(feats, w)?;
    let logits = tape.add_row_bias(logits, b)?;
    let ce = tape.cross_entropy(logits, labels)?;
    let l2 = loss::prompt_l2_on_tape(&mut tape, &blocks)?;
    let (total, report) = loss::total_loss_on_tape(&mut tape, ce, l2, lambda)?;
    let grads = tape.backward(total)?;
    Ok((report, grads))
}

/// Train a prompt for `task` against the frozen `params` and derive its
/// prototype entries. `bank` is only read, to reject classes seen before.
pub fn train_task(
    task: &Task,
    params: &EncoderParams,
    bank: &PrototypeBank,
    config: &TrainConfig,
) -> Result<TaskOutcome> {
    config.validate()?;
    if !params.is_frozen() {
        return Err(Error::Contract("prompt training requires a frozen backbone".into()));
    }
    if let Some(c) = task.classes.iter().find(|c| bank.contains(**c)) {
        return Err(Error::Protocol(format!(
            "class {c} of task {} was already learned by an earlier task",
            task.id
        )));
    }
    if bank.tasks().contains(&task.id) {
        return Err(Error::Protocol(format!("task {} was already trained", task.id)));
    }
    let classes: Vec<ClassId> = task.classes.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let local: BTreeMap<ClassId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    if let Some(s) = task.train.iter().find(|s| !local.contains_key(&s.y)) {
        return Err(Error::Protocol(format!("sample {} has class {} outside task {}", s.id, s.y, task.id)));
    }

    let enc_config = *params.config();
    let d = enc_config.model_dim;
    let mut rng = task_rng(config.seed, task.id);
    let mut prompt = TaskPrompt::init(task.id, &enc_config, config.prompt_len, &mut rng)?;
    let mut head = BTreeMap::from([
        (HEAD_WEIGHT.to_string(), Tensor::randn(&[d, classes.len()], HEAD_INIT_STD, &mut rng)),
        (HEAD_BIAS.to_string(), Tensor::zeros(&[classes.len()])),
    ]);

    let tokens: Vec<Tensor> = task.train.iter().map(|s| params.tokenize(&s.x)).collect::<Result<_>>()?;
    let labels: Vec<usize> = task.train.iter().map(|s| local[&s.y]).collect();
    let batches_per_epoch = task.train.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut last_report = None;
    if total_steps > 0 {
        let mut opt = SgdCosine::new(config.lr, config.weight_decay, total_steps)?;
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for batch in order.chunks(config.batch_size) {
                let lambda = match config.l2_steps {
                    Some(k) if opt.step() >= k => 0.0,
                    _ => config.lambda,
                };
                let batch_tokens: Vec<&Tensor> = batch.iter().map(|&i| &tokens[i]).collect();
                let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let (report, grads) = objective(params, &prompt, &head, &batch_tokens, &batch_labels, lambda)?;
                if !report.total.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                let mut trainable = prompt.named();
                trainable.extend(head.clone());
                opt.apply(&mut trainable, &grads)?;
                prompt.update(&trainable)?;
                for name in [HEAD_WEIGHT, HEAD_BIAS] {
                    head.insert(name.to_string(), trainable[name].clone());
                }
                sum += report.total * batch.len() as f64;
                last_report = Some(report);
            }
            epoch_losses.push(sum / task.train.len() as f64);
        }
    }

    let (prompted, frozen) = encode_both(params, &prompt, &task.train)?;
    let mut correct = 0;
    for (f, &y) in prompted.iter().zip(&labels) {
        let logits = Tensor::matrix(1, d, f.data().to_vec())?
            .matmul(&head[HEAD_WEIGHT])?
            .add(&head[HEAD_BIAS].clone().reshape(vec![1, classes.len()])?)?;
        if argmax_lowest(logits.data()) == y {
            correct += 1;
        }
    }
    let train_accuracy = if task.train.is_empty() { 0.0 } else { correct as f64 / task.train.len() as f64 };

    let pairs = pair_prototypes(&task.train, &classes, &prompted, &frozen)?;
    let entries = pairs
        .into_iter()
        .map(|(c, (p, f))| Ok((c, PrototypeEntry::new(task.id, p, f, config.fusion)?)))
        .collect::<Result<Vec<_>>>()?;

    Ok(TaskOutcome {
        prompt,
        entries,
        epoch_losses,
        last_report,
        train_accuracy,
    })
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Score of one class for one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub class: ClassId,
    pub task_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: ClassId,
    pub task_id: usize,
    pub score: f64,
    /// Every class score, ascending by class id.
    pub scores: Vec<ClassScore>,
}

/// Highest score wins; ties go to the lowest class id.
pub fn best_score(scores: &[ClassScore]) -> Option<ClassScore> {
    let mut best: Option<ClassScore> = None;
    for s in scores {
        best = match best {
            Some(b) if s.score > b.score || (s.score == b.score && s.class < b.class) => Some(*s),
            Some(b) => Some(b),
            None => Some(*s),
        };
    }
    best
}

/// Features of `x` under one task's prompt, fused with the frozen feature.
pub fn fused_feature(
    params: &EncoderParams,
    prompt: &TaskPrompt,
    frozen_feature: &Tensor,
    x: &[f64],
    fusion: FusionStrategy,
) -> Result<Tensor> {
    let h = params.encode(x, Some(prompt))?;
    fuse(&h, frozen_feature, fusion)
}

/// Scores of the classes of `task_id` given the fused feature under that
/// task's prompt.
pub fn task_scores(bank: &PrototypeBank, task_id: usize, fused: &Tensor) -> Result<Vec<ClassScore>> {
    if fused.numel() != bank.fused_dim() {
        return Err(Error::Config(format!(
            "fused feature width {} does not match prototype width {}",
            fused.numel(),
            bank.fused_dim()
        )));
    }
    let classes = bank.classes_of(task_id);
    let protos: Vec<&Tensor> = classes.iter().map(|c| &bank.get(*c).expect("listed").fused).collect();
    let scores = similarity_scores(fused, &protos)?;
    Ok(classes
        .into_iter()
        .zip(scores)
        .map(|(class, score)| ClassScore { class, task_id, score })
        .collect())
}

fn prompt_for(prompts: &[TaskPrompt], task: usize) -> Result<&TaskPrompt> {
    prompts
        .iter()
        .find(|p| p.task_id == task)
        .ok_or_else(|| Error::Contract(format!("no prompt for task {task}")))
}

/// Task-agnostic prediction over every class in `bank`.
pub fn predict(
    params: &EncoderParams,
    prompts: &[TaskPrompt],
    bank: &PrototypeBank,
    x: &[f64],
) -> Result<Prediction> {
    if bank.is_empty() {
        return Err(Error::Contract("prediction needs at least one prototype".into()));
    }
    let frozen = params.encode(x, None)?;
    let mut scores = Vec::with_capacity(bank.len());
    for task in bank.tasks() {
        let prompt = prompt_for(prompts, task)?;
        let fused = fused_feature(params, prompt, &frozen, x, bank.fusion())?;
        scores.extend(task_scores(bank, task, &fused)?);
    }
    scores.sort_by_key(|s| s.class);
    let best = best_score(&scores).expect("bank is non-empty");
    Ok(Prediction {
        class: best.class,
        task_id: best.task_id,
        score: best.score,
        scores,
    })
}

/// Anything that can be trained task by task and then asked for a class.
pub trait ContinualLearner {
    fn learn(&mut self, task: &Task) -> Result<()>;
    fn predict_class(&self, x: &[f64]) -> Result<ClassId>;
}

/// A frozen backbone with the prompts and prototypes learned so far.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPrototypeModel {
    params: EncoderParams,
    prompts: Vec<TaskPrompt>,
    bank: PrototypeBank,
    config: TrainConfig,
}

impl PromptPrototypeModel {
    pub fn new(params: EncoderParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !params.is_frozen() {
            return Err(Error::Contract("the backbone must be frozen".into()));
        }
        let bank = PrototypeBank::new(config.fusion, params.config().model_dim);
        Ok(Self {
            params,
            prompts: Vec::new(),
            bank,
            config,
        })
    }

    /// Reassemble from stored parts, e.g. a checkpoint.
    pub fn from_parts(
        params: EncoderParams,
        prompts: Vec<TaskPrompt>,
        bank: PrototypeBank,
        config: TrainConfig,
    ) -> Result<Self> {
        let mut model = Self::new(params, TrainConfig { fusion: bank.fusion(), ..config })?;
        for t in bank.tasks() {
            prompt_for(&prompts, t)?;
        }
        model.prompts = prompts;
        model.bank = bank;
        Ok(model)
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn prompts(&self) -> &[TaskPrompt] {
        &self.prompts
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn num_tasks(&self) -> usize {
        self.prompts.len()
    }

    /// Train the next task and store its prompt and prototypes.
    pub fn learn_task(&mut self, task: &Task) -> Result<TaskOutcome> {
        let outcome = train_task(task, &self.params, &self.bank, &self.config).map_err(|e| e.in_task(task.id))?;
        for (c, e) in &outcome.entries {
            self.bank.insert(*c, e.clone()).map_err(|e| e.in_task(task.id))?;
        }
        self.prompts.push(outcome.prompt.clone());
        Ok(outcome)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        predict(&self.params, &self.prompts, &self.bank, x)
    }

    /// Same prompts and component prototypes, fused another way.
    pub fn with_fusion(&self, fusion: FusionStrategy) -> Result<Self> {
        Ok(Self {
            bank: self.bank.refused(fusion)?,
            config: TrainConfig { fusion, ..self.config.clone() },
            ..self.clone()
        })
    }
}

impl ContinualLearner for PromptPrototypeModel {
    fn learn(&mut self, task: &Task) -> Result<()> {
        self.learn_task(task).map(|_| ())
    }

    fn predict_class(&self, x: &[f64]) -> Result<ClassId> {
        self.predict(x).map(|p| p.class)
    }
}
