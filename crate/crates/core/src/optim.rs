use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Plain SGD with cosine learning-rate decay and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdCosine {
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    step: usize,
}

impl SgdCosine {
    pub const DEFAULT_LR: f64 = 0.03;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0005;

    pub fn new(initial_lr: f64, weight_decay: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("optimizer needs at least one step".into()));
        }
        if !(initial_lr >= 0.0 && weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {initial_lr} and weight decay {weight_decay} must be non-negative"
            )));
        }
        Ok(Self {
            initial_lr,
            weight_decay,
            total_steps,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// `initial_lr * 0.5 * (1 + cos(pi * step / total_steps))`, zero past the end.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        self.initial_lr * 0.5 * (1.0 + (PI * step as f64 / self.total_steps as f64).cos())
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// `p <- p - lr * (g + weight_decay * p)` for every named parameter, then
    /// advance the schedule. The gradient set must name exactly the
    /// parameters being updated.
    pub fn apply(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() || grads.iter().any(|(k, _)| !params.contains_key(k)) {
            let have: Vec<_> = params.keys().collect();
            let got: Vec<_> = grads.iter().map(|(k, _)| k).collect();
            return Err(Error::Contract(format!(
                "gradients for {got:?} do not match parameters {have:?}"
            )));
        }
        let lr = self.current_lr();
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            if p.shape() != g.shape() {
                return Err(Error::dim("sgd_step", format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            if lr != 0.0 {
                for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * (d + self.weight_decay * *w);
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn grads_for(name: &str, value: f64) -> Gradients {
        // d(sum(value * p))/dp = value
        let mut tape = Tape::new();
        let p = tape.param(name, Tensor::scalar(1.0)).unwrap();
        let scaled = tape.scale(p, value);
        let loss = tape.sum(scaled);
        tape.backward(loss).unwrap()
    }

    fn one_param(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn schedule_endpoints() {
        let opt = SgdCosine::new(0.03, 0.0, 10).unwrap();
        assert_eq!(opt.lr_at(0), 0.03);
        assert_eq!(opt.lr_at(10), 0.0);
        assert!((opt.lr_at(5) - 0.015).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_non_increasing() {
        let opt = SgdCosine::new(0.03, 0.0, 37).unwrap();
        for s in 0..40 {
            assert!(opt.lr_at(s + 1) <= opt.lr_at(s));
        }
    }

    #[test]
    fn first_step_by_hand() {
        let mut opt = SgdCosine::new(0.03, 0.0, 100).unwrap();
        let mut params = one_param(1.0);
        opt.apply(&mut params, &grads_for("p", 1.0)).unwrap();
        assert!((params["p"].data()[0] - 0.97).abs() < 1e-15);
        assert_eq!(opt.step(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut opt = SgdCosine::new(0.03, 0.0, 5).unwrap();
        let mut params = one_param(0.123);
        opt.apply(&mut params, &grads_for("p", 0.0)).unwrap();
        assert_eq!(params["p"].data()[0], 0.123);
    }

    #[test]
    fn exhausted_schedule_leaves_params() {
        let mut opt = SgdCosine::new(0.03, 0.0005, 1).unwrap();
        let mut params = one_param(2.0);
        opt.apply(&mut params, &grads_for("p", 1.0)).unwrap();
        let after_first = params["p"].data()[0];
        opt.apply(&mut params, &grads_for("p", 1.0)).unwrap();
        assert_eq!(params["p"].data()[0], after_first);
    }

    #[test]
    fn mismatched_parameter_set_is_rejected() {
        let mut opt = SgdCosine::new(0.03, 0.0, 5).unwrap();
        let mut params = one_param(1.0);
        let err = opt.apply(&mut params, &grads_for("q", 1.0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
