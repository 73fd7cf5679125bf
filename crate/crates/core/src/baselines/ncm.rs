//! Nearest class mean on frozen backbone features with cosine scoring.

use std::collections::BTreeMap;

use crate::data::{ClassId, Task};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::learner::ContinualLearner;
use crate::prototype::{class_prototype, similarity_scores};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NcmModel {
    params: EncoderParams,
    means: BTreeMap<ClassId, Tensor>,
}

impl NcmModel {
    pub fn new(params: EncoderParams) -> Result<Self> {
        if !params.is_frozen() {
            return Err(Error::Contract("nearest class mean needs a frozen backbone".into()));
        }
        Ok(Self {
            params,
            means: BTreeMap::new(),
        })
    }

    pub fn means(&self) -> &BTreeMap<ClassId, Tensor> {
        &self.means
    }

    pub fn learn_task(&mut self, task: &Task) -> Result<()> {
        let mut feats: BTreeMap<ClassId, Vec<Tensor>> = task.classes.iter().map(|&c| (c, Vec::new())).collect();
        for s in &task.train {
            let slot = feats
                .get_mut(&s.y)
                .ok_or_else(|| Error::Protocol(format!("sample {} has class {} outside task {}", s.id, s.y, task.id)))?;
            slot.push(self.params.encode(&s.x, None)?);
        }
        if let Some(c) = feats.keys().find(|c| self.means.contains_key(c)) {
            return Err(Error::Protocol(format!("class {c} was already learned")).in_task(task.id));
        }
        for (c, f) in feats {
            let mean = class_prototype(c, &f).map_err(|e| e.in_task(task.id))?;
            self.means.insert(c, mean);
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<ClassId> {
        if self.means.is_empty() {
            return Err(Error::Contract("no class means".into()));
        }
        let f = self.params.encode(x, None)?;
        let protos: Vec<&Tensor> = self.means.values().collect();
        let scores = similarity_scores(&f, &protos)?;
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (i, &s)| if s > scores[b] { i } else { b });
        Ok(*self.means.keys().nth(best).expect("index in range"))
    }
}

impl ContinualLearner for NcmModel {
    fn learn(&mut self, task: &Task) -> Result<()> {
        self.learn_task(task)
    }

    fn predict_class(&self, x: &[f64]) -> Result<ClassId> {
        self.predict(x)
    }
}
