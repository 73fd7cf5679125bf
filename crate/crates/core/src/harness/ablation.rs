//! Seed-averaged sweeps over one hyper-parameter axis.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::config::ExperimentConfig;
use super::experiment::{run_method, Method, PreparedData};
use super::metrics::{evaluate_seen, run_stream, AccuracyRecord};
use super::stream::make_task_stream;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::learner::PromptPrototypeModel;
use crate::prototype::FusionStrategy;

pub const LAMBDA_SWEEP: [f64; 5] = [0.01, 0.05, 0.025, 0.1, 0.2];
pub const PROMPT_LEN_SWEEP: [usize; 5] = [1, 5, 10, 15, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Lambda,
    PromptLen,
    LossComponents,
    Fusion,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Axis::Lambda),
            "prompt_len" => Ok(Axis::PromptLen),
            "loss_components" => Ok(Axis::LossComponents),
            "fusion" => Ok(Axis::Fusion),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Lambda => "lambda",
            Axis::PromptLen => "prompt_len",
            Axis::LossComponents => "loss_components",
            Axis::Fusion => "fusion",
        })
    }
}

/// One setting of the swept axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub label: String,
    pub config: ExperimentConfig,
}

/// The settings of `axis`, each applied on top of `base`.
pub fn settings(axis: Axis, base: &ExperimentConfig) -> Vec<Setting> {
    let with = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Setting { label, config }
    };
    match axis {
        Axis::Lambda => LAMBDA_SWEEP.iter().map(|&l| with(l.to_string(), &|c| c.lambda = l)).collect(),
        Axis::PromptLen => PROMPT_LEN_SWEEP
            .iter()
            .map(|&p| with(p.to_string(), &|c| c.prompt_len = p))
            .collect(),
        Axis::LossComponents => vec![
            with("ce_only".into(), &|c| c.lambda = 0.0),
            with("ce_l2".into(), &|c| {
                if c.lambda == 0.0 {
                    c.lambda = crate::loss::DEFAULT_LAMBDA;
                }
            }),
        ],
        Axis::Fusion => FusionStrategy::ALL
            .iter()
            .map(|&f| with(f.to_string(), &|c| c.fusion = f))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub last: Vec<f64>,
    pub avg: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().fold(0.0, |a, x| a + x) / v.len() as f64
    }
}

impl AblationRow {
    pub fn mean_last(&self) -> f64 {
        mean(&self.last)
    }

    pub fn mean_avg(&self) -> f64 {
        mean(&self.avg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let seeds = self.rows.first().map(|r| r.seeds.clone()).unwrap_or_default();
        let mut out = format!("{},mean_last,mean_avg", self.axis);
        for s in &seeds {
            write!(out, ",last_seed_{s}").expect("string write");
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{:.6},{:.6}", r.label, r.mean_last(), r.mean_avg()).expect("string write");
            for l in &r.last {
                write!(out, ",{l:.6}").expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// Run ProP for every setting and seed. Fusion only changes how the
/// prototypes are combined, so that axis trains once per seed and scores
/// every strategy on the same prompts.
pub fn run_settings(
    axis: Axis,
    settings: &[Setting],
    seeds: &[u64],
    data: &PreparedData,
    backbone: &EncoderParams,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    let mut rows: Vec<AblationRow> = settings
        .iter()
        .map(|s| AblationRow {
            label: s.label.clone(),
            seeds: seeds.to_vec(),
            last: Vec::new(),
            avg: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        if axis == Axis::Fusion {
            let base = ExperimentConfig { seed, ..settings[0].config.clone() };
            let records = fusion_records(&base, settings, data, backbone)?;
            for (row, rec) in rows.iter_mut().zip(records) {
                row.last.push(rec.final_last().unwrap_or(0.0));
                row.avg.push(rec.final_avg().unwrap_or(0.0));
            }
            continue;
        }
        for (row, s) in rows.iter_mut().zip(settings) {
            let config = ExperimentConfig { seed, ..s.config.clone() };
            config.validate()?;
            let stream = make_task_stream(&data.stream, config.init_classes, config.inc_classes, seed)?;
            let out = run_method(&config, Method::Prop, &stream, backbone)?;
            row.last.push(out.record.final_last().unwrap_or(0.0));
            row.avg.push(out.record.final_avg().unwrap_or(0.0));
        }
    }
    Ok(AblationTable { axis, rows })
}

fn fusion_records(
    config: &ExperimentConfig,
    settings: &[Setting],
    data: &PreparedData,
    backbone: &EncoderParams,
) -> Result<Vec<AccuracyRecord>> {
    config.validate()?;
    let stream = make_task_stream(&data.stream, config.init_classes, config.inc_classes, config.seed)?;
    let mut model = PromptPrototypeModel::new(backbone.clone(), config.train())?;
    let mut records = vec![AccuracyRecord::new(); settings.len()];
    run_stream(&mut model, &stream.tasks, |t, m| {
        for (rec, s) in records.iter_mut().zip(settings) {
            let variant = m.with_fusion(s.config.fusion)?;
            let (last, per_task) = evaluate_seen(&variant, &stream.tasks[..=t])?;
            rec.push(last, per_task)?;
        }
        Ok(())
    })?;
    Ok(records)
}

/// Every setting of `axis` averaged over `seeds`.
pub fn ablation_sweep(
    base: &ExperimentConfig,
    axis: Axis,
    seeds: &[u64],
    data: &PreparedData,
    backbone: &EncoderParams,
) -> Result<AblationTable> {
    run_settings(axis, &settings(axis, base), seeds, data, backbone)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_values() {
        let base = ExperimentConfig::default();
        let l: Vec<f64> = settings(Axis::Lambda, &base).iter().map(|s| s.config.lambda).collect();
        assert_eq!(l, LAMBDA_SWEEP.to_vec());
        let p: Vec<usize> = settings(Axis::PromptLen, &base).iter().map(|s| s.config.prompt_len).collect();
        assert_eq!(p, PROMPT_LEN_SWEEP.to_vec());
        let c = settings(Axis::LossComponents, &base);
        assert_eq!((c.len(), c[0].config.lambda, c[1].config.lambda), (2, 0.0, 0.1));
        assert_eq!(settings(Axis::Fusion, &base).len(), 4);
    }

    #[test]
    fn unknown_axis_is_config_error() {
        assert!("depth".parse::<Axis>().unwrap_err().is_config());
    }
}
