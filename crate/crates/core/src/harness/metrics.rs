//! Accuracy bookkeeping for a task stream and the evaluation loop shared by
//! every method.

use std::fmt::Write as _;

use crate::data::{Sample, Task};
use crate::error::{Error, Result};
use crate::learner::ContinualLearner;

/// `last[t]`: accuracy over the test data of every class seen through task
/// `t`. `avg[t]`: mean of `last[0..=t]`. `per_task[t][i]`: accuracy on task
/// `i`'s test data after training task `t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyRecord {
    pub last: Vec<f64>,
    pub avg: Vec<f64>,
    pub per_task: Vec<Vec<f64>>,
}

impl AccuracyRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> usize {
        self.last.len()
    }

    pub fn push(&mut self, last: f64, per_task: Vec<f64>) -> Result<()> {
        if !(0.0..=1.0).contains(&last) || per_task.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Contract(format!("accuracy out of range: {last}")));
        }
        if per_task.len() != self.last.len() + 1 {
            return Err(Error::Contract("per-task accuracies must cover every seen task".into()));
        }
        self.last.push(last);
        let sum = self.last.iter().fold(0.0, |a, x| a + x);
        self.avg.push(sum / self.last.len() as f64);
        self.per_task.push(per_task);
        Ok(())
    }

    pub fn final_last(&self) -> Option<f64> {
        self.last.last().copied()
    }

    pub fn final_avg(&self) -> Option<f64> {
        self.avg.last().copied()
    }

    /// `step,last,avg,task_0..task_{T-1}`; tasks not yet seen are empty.
    pub fn to_csv(&self) -> String {
        let t = self.steps();
        let mut out = String::from("step,last,avg");
        for i in 0..t {
            write!(out, ",task_{i}").expect("string write");
        }
        out.push('\n');
        for (s, row) in self.per_task.iter().enumerate() {
            write!(out, "{},{:.6},{:.6}", s + 1, self.last[s], self.avg[s]).expect("string write");
            for i in 0..t {
                match row.get(i) {
                    Some(a) => write!(out, ",{a:.6}").expect("string write"),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Fraction of `samples` that `predict` labels correctly; 0 for none.
pub fn accuracy<F>(samples: &[Sample], mut predict: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<u32>,
{
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in samples {
        if predict(&s.x)? == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Overall and per-task accuracy on the test data of `seen`.
pub fn evaluate_seen<L: ContinualLearner + ?Sized>(learner: &L, seen: &[Task]) -> Result<(f64, Vec<f64>)> {
    let mut correct = 0.0;
    let mut total = 0usize;
    let mut per_task = Vec::with_capacity(seen.len());
    for t in seen {
        let acc = accuracy(&t.test, |x| learner.predict_class(x))?;
        correct += acc * t.test.len() as f64;
        total += t.test.len();
        per_task.push(acc);
    }
    let last = if total == 0 { 0.0 } else { correct / total as f64 };
    Ok((last.clamp(0.0, 1.0), per_task))
}

/// Train `learner` on each task in order, evaluating over every seen class
/// after each step. `after_step` sees the learner after each evaluation.
pub fn run_stream<L, F>(learner: &mut L, tasks: &[Task], mut after_step: F) -> Result<AccuracyRecord>
where
    L: ContinualLearner + ?Sized,
    F: FnMut(usize, &L) -> Result<()>,
{
    let mut record = AccuracyRecord::new();
    for (t, task) in tasks.iter().enumerate() {
        learner.learn(task).map_err(|e| e.in_task(task.id))?;
        let (last, per_task) = evaluate_seen(learner, &tasks[..=t])?;
        record.push(last, per_task)?;
        after_step(t, learner)?;
    }
    Ok(record)
}
