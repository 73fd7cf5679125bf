//! Backbone pretraining on base classes that never appear in the stream.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{train_supervised, LinearHead};
use crate::data::{ClassId, Sample};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::learner::TrainConfig;

#[derive(Debug, Clone)]
pub struct Pretrained {
    /// Frozen; the head is discarded.
    pub params: EncoderParams,
    pub train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Train encoder + temporary head with cross-entropy on `base`, then freeze.
/// Any base class also in `stream_classes` is a protocol violation.
pub fn pretrain_backbone(
    base: &[Sample],
    stream_classes: &BTreeSet<ClassId>,
    encoder: EncoderConfig,
    config: &TrainConfig,
) -> Result<Pretrained> {
    let classes: BTreeSet<ClassId> = base.iter().map(|s| s.y).collect();
    if let Some(c) = classes.intersection(stream_classes).next() {
        return Err(Error::Protocol(format!("base class {c} also appears in the task stream")));
    }
    if classes.is_empty() {
        return Err(Error::Config("pretraining needs at least one base sample".into()));
    }
    let index: BTreeMap<ClassId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let labels: Vec<usize> = base.iter().map(|s| index[&s.y]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = EncoderParams::init(encoder, &mut rng)?;
    let mut head = LinearHead::init(encoder.model_dim, classes.len(), &mut rng);
    let epoch_losses = train_supervised(&mut params, &mut head, base, &labels, config, &mut rng)?;

    let mut correct = 0usize;
    for (s, &y) in base.iter().zip(&labels) {
        let logits = head.logits(&params.encode(&s.x, None)?)?;
        let pred = logits
            .data()
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > logits.data()[b] { i } else { b });
        correct += usize::from(pred == y);
    }
    params.freeze();
    Ok(Pretrained {
        params,
        train_accuracy: correct as f64 / base.len() as f64,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_with_stream_is_protocol_violation() {
        let base = vec![Sample { id: 0, x: vec![0.0; 4], y: 3 }];
        let err = pretrain_backbone(&base, &BTreeSet::from([3]), EncoderConfig::desk(4), &TrainConfig::default())
            .unwrap_err();
        assert!(err.is_protocol());
    }
}
