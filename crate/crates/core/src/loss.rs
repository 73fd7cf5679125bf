//! Training objective for a task prompt: cross-entropy of the temporary head
//! plus a weighted Euclidean norm of the prompt.

use crate::autodiff::{self, Tape, Var};
use crate::encoder::TaskPrompt;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Mean cross-entropy of softmax(logits) against local class indices.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::dim(
            "ce_loss",
            format!("logits {:?} for {} labels", logits.shape(), labels.len()),
        ));
    }
    let m = logits.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(Error::Contract(format!("label {y} out of range for {m} classes")));
        }
        let row = logits.row(i);
        total += autodiff::log_sum_exp(row) - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Euclidean norm of every prompt element across all blocks.
pub fn prompt_l2(prompt: &TaskPrompt) -> f64 {
    prompt
        .blocks()
        .iter()
        .flat_map(|b| b.data())
        .fold(0.0, |acc, &v| acc + v * v)
        .sqrt()
}

pub fn total_loss(ce: f64, l2: f64, lambda: f64) -> f64 {
    ce + lambda * l2
}

/// Values of one training step's objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub l2: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(ce: f64, l2: f64, lambda: f64) -> Self {
        Self {
            ce,
            l2,
            lambda,
            total: total_loss(ce, l2, lambda),
        }
    }
}

/// `sqrt(sum of squares)` over the given prompt blocks, on the tape.
pub fn prompt_l2_on_tape(tape: &mut Tape, blocks: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &b in blocks {
        let sq = tape.mul(b, b)?;
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let acc = acc.ok_or_else(|| Error::Contract("prompt without blocks".into()))?;
    tape.sqrt(acc)
}

/// Records `ce + lambda * l2` and returns it with the matching report.
pub fn total_loss_on_tape(tape: &mut Tape, ce: Var, l2: Var, lambda: f64) -> Result<(Var, LossReport)> {
    let weighted = tape.scale(l2, lambda);
    let total = tape.add(ce, weighted)?;
    let report = LossReport::new(
        tape.value(ce).data()[0],
        tape.value(l2).data()[0],
        lambda,
    );
    debug_assert_eq!(report.total, tape.value(total).data()[0]);
    Ok((total, report))
}
