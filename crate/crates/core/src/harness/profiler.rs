//! Closed-form inference cost of prototype prompting versus key-value
//! retrieval, and measured attention multiply-accumulates.
//!
//! Counting convention: the formulas count one `n x n x D` product per layer
//! and pass. The encoder executes two such products per layer (scores and
//! weighted values, summed over heads), so measured counts are halved before
//! comparison. The prompt-free pass that produces frozen features (and the
//! key-value query) is reported on its own and excluded from the prompted
//! total, which is the quantity that scales with the number of tasks.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, EncoderParams, TaskPrompt};
use crate::error::{Error, Result};

/// T tasks, L layers, L_h hidden tokens, L_p prompt length, D width, P
/// prompt-pool size and k prompts selected per input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub tasks: u64,
    pub layers: u64,
    pub hidden_len: u64,
    pub prompt_len: u64,
    pub dim: u64,
    pub pool: u64,
    pub top_k: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopEstimate {
    /// `T·L_p·D`: comparing against every task's prototypes.
    pub prop_similarity: u64,
    /// `T·L·(L_h+L_p)²·D`: one prompted pass per task.
    pub prop_forward: u64,
    pub prop_total: u64,
    pub kv_total: u64,
}

fn overflow() -> Error {
    Error::Overflow("flop_estimate")
}

fn mul(values: &[u64]) -> Result<u64> {
    values.iter().try_fold(1u64, |acc, &v| acc.checked_mul(v)).ok_or_else(overflow)
}

/// ProP: `T·L_p·D + T·L·(L_h+L_p)²·D`; key-value:
/// `P·L_p·D + L·(L_h + k·L_p)²·D`, in checked integer arithmetic.
pub fn flop_estimate(m: &CostModel) -> Result<FlopEstimate> {
    let positive = [m.tasks, m.layers, m.hidden_len, m.dim, m.pool, m.top_k];
    if positive.contains(&0) {
        return Err(Error::Config("cost model fields must be positive (prompt length may be 0)".into()));
    }
    let n = m.hidden_len.checked_add(m.prompt_len).ok_or_else(overflow)?;
    let prop_similarity = mul(&[m.tasks, m.prompt_len, m.dim])?;
    let prop_forward = mul(&[m.tasks, m.layers, n, n, m.dim])?;
    let kv_n = m
        .top_k
        .checked_mul(m.prompt_len)
        .and_then(|v| v.checked_add(m.hidden_len))
        .ok_or_else(overflow)?;
    let kv_total = mul(&[m.pool, m.prompt_len, m.dim])?
        .checked_add(mul(&[m.layers, kv_n, kv_n, m.dim])?)
        .ok_or_else(overflow)?;
    Ok(FlopEstimate {
        prop_similarity,
        prop_forward,
        prop_total: prop_similarity.checked_add(prop_forward).ok_or_else(overflow)?,
        kv_total,
    })
}

/// Attention multiply-accumulates executed by one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacCount {
    /// All passes under a task prompt.
    pub prompted: u64,
    /// The prompt-free pass.
    pub frozen: u64,
}

impl MacCount {
    /// Prompted count in the formula's one-product-per-layer unit.
    pub fn prompted_formula_units(&self) -> u64 {
        self.prompted / 2
    }
}

/// Count the attention work of predicting `x` with `prompts`: one
/// prompt-free pass plus one pass per prompt.
pub fn measure_macs(params: &EncoderParams, prompts: &[TaskPrompt], x: &[f64]) -> Result<MacCount> {
    let (_, frozen) = params.encode_counted(x, None)?;
    let mut prompted = 0u64;
    for p in prompts {
        let (_, m) = params.encode_counted(x, Some(p))?;
        prompted = prompted.checked_add(m).ok_or(Error::Overflow("measure_macs"))?;
    }
    Ok(MacCount { prompted, frozen })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub model: CostModel,
    pub estimate: FlopEstimate,
    pub measured: MacCount,
    /// Prompted formula units over the formula's forward term.
    pub ratio: f64,
    pub micros_per_predict: f64,
}

/// Measure ProP inference for each task count in `task_counts` with random
/// prompts of length `prompt_len` on `params`.
pub fn profile(params: &EncoderParams, prompt_len: usize, task_counts: &[usize], seed: u64) -> Result<Vec<ProfileRow>> {
    let c: EncoderConfig = *params.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..c.input_dim).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut rows = Vec::with_capacity(task_counts.len());
    for &t in task_counts {
        let prompts = (0..t)
            .map(|i| TaskPrompt::init(i, &c, prompt_len, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let start = Instant::now();
        let measured = measure_macs(params, &prompts, &x)?;
        let micros = start.elapsed().as_secs_f64() * 1e6;
        let model = CostModel {
            tasks: t as u64,
            layers: c.num_layers as u64,
            hidden_len: c.seq_len as u64,
            prompt_len: prompt_len as u64,
            dim: c.model_dim as u64,
            pool: t as u64,
            top_k: 1,
        };
        let estimate = flop_estimate(&model)?;
        rows.push(ProfileRow {
            model,
            estimate,
            measured,
            ratio: measured.prompted_formula_units() as f64 / estimate.prop_forward as f64,
            micros_per_predict: micros,
        });
    }
    Ok(rows)
}

/// Freshly initialised backbone; attention cost does not depend on weights.
pub fn seeded_backbone(config: EncoderConfig, seed: u64) -> Result<EncoderParams> {
    EncoderParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from(
        "T,L,L_h,L_p,D,P,k,prop_similarity,prop_forward,prop_total,kv_total,measured_prompted_macs,measured_frozen_macs,measured_formula_units,ratio,micros_per_predict\n",
    );
    for r in rows {
        let m = &r.model;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.1}",
            m.tasks,
            m.layers,
            m.hidden_len,
            m.prompt_len,
            m.dim,
            m.pool,
            m.top_k,
            r.estimate.prop_similarity,
            r.estimate.prop_forward,
            r.estimate.prop_total,
            r.estimate.kv_total,
            r.measured.prompted,
            r.measured.frozen,
            r.measured.prompted_formula_units(),
            r.ratio,
            r.micros_per_predict
        )
        .expect("string write");
    }
    out
}
