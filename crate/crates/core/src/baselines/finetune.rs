//! Sequential full finetuning: the backbone and a softmax head that grows
//! with every task are trained on cross-entropy over all classes seen so
//! far, using only the current task's data.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tape;
use crate::data::{ClassId, Sample, Task};
use crate::encoder::{EncoderParams, TOKENIZER};
use crate::error::{Error, Result};
use crate::learner::{task_rng, ContinualLearner, TrainConfig, HEAD_BIAS, HEAD_INIT_STD, HEAD_WEIGHT};
use crate::optim::SgdCosine;
use crate::tensor::Tensor;

/// Linear head over encoder features, one column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[dim, classes], HEAD_INIT_STD, rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    /// Append `extra` freshly initialised columns.
    pub fn grow<R: Rng + ?Sized>(&mut self, extra: usize, rng: &mut R) -> Result<()> {
        let (d, m) = (self.weight.rows(), self.weight.cols());
        let fresh = Tensor::randn(&[d, extra], HEAD_INIT_STD, rng);
        let mut w = Vec::with_capacity(d * (m + extra));
        for r in 0..d {
            w.extend_from_slice(self.weight.row(r));
            w.extend_from_slice(fresh.row(r));
        }
        self.weight = Tensor::matrix(d, m + extra, w)?;
        let mut b = self.bias.data().to_vec();
        b.resize(m + extra, 0.0);
        self.bias = Tensor::vector(b)?;
        Ok(())
    }

    pub fn logits(&self, feature: &Tensor) -> Result<Tensor> {
        Tensor::matrix(1, feature.numel(), feature.data().to_vec())?
            .matmul(&self.weight)?
            .add(&self.bias.clone().reshape(vec![1, self.num_classes()])?)
    }
}

/// Train backbone and head jointly with cross-entropy. `labels[i]` is the
/// head column of `samples[i]`. Returns the mean loss of every epoch.
pub fn train_supervised<R: Rng + ?Sized>(
    params: &mut EncoderParams,
    head: &mut LinearHead,
    samples: &[Sample],
    labels: &[usize],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    config.validate()?;
    if samples.len() != labels.len() {
        return Err(Error::dim("train_supervised", format!("{} samples, {} labels", samples.len(), labels.len())));
    }
    let steps = config.epochs * samples.len().div_ceil(config.batch_size);
    if steps == 0 {
        return Ok(Vec::new());
    }
    let tokens: Vec<Tensor> = samples.iter().map(|s| params.tokenize(&s.x)).collect::<Result<_>>()?;
    let mut opt = SgdCosine::new(config.lr, config.weight_decay, steps)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let enc = params.bind(&mut tape, true)?;
            let w = tape.param(HEAD_WEIGHT, head.weight.clone())?;
            let b = tape.param(HEAD_BIAS, head.bias.clone())?;
            let feats = batch
                .iter()
                .map(|&i| enc.forward(&mut tape, &tokens[i], None))
                .collect::<Result<Vec<_>>>()?;
            let feats = tape.concat_rows(&feats)?;
            let logits = tape.matmul(feats, w)?;
            let logits = tape.add_row_bias(logits, b)?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let ce = tape.cross_entropy(logits, &batch_labels)?;
            let value = tape.value(ce).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite("finetune loss"));
            }
            let grads = tape.backward(ce)?;
            let mut trainable: BTreeMap<String, Tensor> = params
                .tensors()
                .iter()
                .filter(|(n, _)| n.as_str() != TOKENIZER)
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect();
            trainable.insert(HEAD_WEIGHT.into(), head.weight.clone());
            trainable.insert(HEAD_BIAS.into(), head.bias.clone());
            opt.apply(&mut trainable, &grads)?;
            head.weight = trainable.remove(HEAD_WEIGHT).expect("inserted");
            head.bias = trainable.remove(HEAD_BIAS).expect("inserted");
            params.update(&trainable)?;
            sum += value * batch.len() as f64;
        }
        losses.push(sum / samples.len() as f64);
    }
    Ok(losses)
}

fn argmax_lowest(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Trainable backbone plus growing head; no prompts, no prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneModel {
    params: EncoderParams,
    head: Option<LinearHead>,
    /// Global class id of every head column.
    columns: Vec<ClassId>,
    config: TrainConfig,
}

impl FinetuneModel {
    /// Starts from a trainable copy of `params`.
    pub fn new(params: &EncoderParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: params.unfrozen(),
            head: None,
            columns: Vec::new(),
            config,
        })
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.columns
    }

    pub fn learn_task(&mut self, task: &Task) -> Result<Vec<f64>> {
        self.learn_inner(task).map_err(|e| e.in_task(task.id))
    }

    fn learn_inner(&mut self, task: &Task) -> Result<Vec<f64>> {
        let mut new: Vec<ClassId> = task.classes.clone();
        new.sort_unstable();
        new.dedup();
        if let Some(c) = new.iter().find(|c| self.columns.contains(c)) {
            return Err(Error::Protocol(format!("class {c} was already learned")));
        }
        let mut rng = task_rng(self.config.seed, task.id);
        let d = self.params.config().model_dim;
        match &mut self.head {
            Some(h) => h.grow(new.len(), &mut rng)?,
            None => self.head = Some(LinearHead::init(d, new.len(), &mut rng)),
        }
        self.columns.extend(&new);
        let index: BTreeMap<ClassId, usize> = self.columns.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let labels = task
            .train
            .iter()
            .map(|s| {
                new.binary_search(&s.y)
                    .map(|_| index[&s.y])
                    .map_err(|_| Error::Protocol(format!("sample {} has class {} outside task {}", s.id, s.y, task.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let head = self.head.as_mut().expect("initialised above");
        train_supervised(&mut self.params, head, &task.train, &labels, &self.config, &mut rng)
    }

    pub fn predict(&self, x: &[f64]) -> Result<ClassId> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Contract("finetune model has not learned any task".into()))?;
        let f = self.params.encode(x, None)?;
        Ok(self.columns[argmax_lowest(head.logits(&f)?.data())])
    }
}

impl ContinualLearner for FinetuneModel {
    fn learn(&mut self, task: &Task) -> Result<()> {
        self.learn_task(task).map(|_| ())
    }

    fn predict_class(&self, x: &[f64]) -> Result<ClassId> {
        self.predict(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grow_keeps_old_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = LinearHead::init(3, 2, &mut rng);
        head.bias.data_mut()[1] = 0.5;
        let before = head.clone();
        head.grow(2, &mut rng).unwrap();
        assert_eq!(head.weight.shape(), &[3, 4]);
        for r in 0..3 {
            assert_eq!(&head.weight.row(r)[..2], before.weight.row(r));
        }
        assert_eq!(head.bias.data(), &[0.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn predict_before_training_is_an_error() {
        let params = EncoderParams::init(EncoderConfig::desk(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let model = FinetuneModel::new(&params, TrainConfig::default()).unwrap();
        assert!(model.predict(&[0.0; 4]).is_err());
    }

    #[test]
    fn repeated_class_is_a_protocol_violation() {
        let params = EncoderParams::init(EncoderConfig::desk(2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let config = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let mut model = FinetuneModel::new(&params, config).unwrap();
        let s = |id, y| Sample { id, x: vec![y as f64, 1.0], y };
        let t0 = Task { id: 0, classes: vec![0, 1], train: vec![s(0, 0), s(1, 1)], test: vec![] };
        model.learn_task(&t0).unwrap();
        let t1 = Task { id: 1, classes: vec![1, 2], train: vec![s(2, 1), s(3, 2)], test: vec![] };
        assert!(model.learn_task(&t1).unwrap_err().is_protocol());
    }
}
