//! Seed-averaged pilot on the default synthetic stream: final Last of every
//! method, key retrieval accuracy, and the prompt norm left by the penalty.
//!
//! cargo run --release -p prop-core --example pilot

use prop_core::harness::config::AVERAGE_SEEDS;
use prop_core::harness::experiment::obtain_backbone;
use prop_core::harness::{make_task_stream, prepare_data, run_method, ExperimentConfig, Method};
use prop_core::loss::prompt_l2;
use prop_core::{PromptPrototypeModel, Result, TrainConfig};

fn main() -> Result<()> {
    let config = ExperimentConfig::default();
    let data = prepare_data(&config, None)?;
    let backbone = obtain_backbone(&config, &data, None)?;
    let methods = [Method::Prop, Method::Ncm, Method::Kv, Method::Finetune];
    let mut totals = vec![0.0; methods.len()];
    let mut retrieval = 0.0;
    println!("seed,{}", methods.map(|m| m.to_string()).join(","));
    for &seed in &AVERAGE_SEEDS {
        let c = ExperimentConfig { seed, ..config.clone() };
        let stream = make_task_stream(&data.stream, c.init_classes, c.inc_classes, seed)?;
        let mut row = vec![seed.to_string()];
        for (i, &m) in methods.iter().enumerate() {
            let out = run_method(&c, m, &stream, &backbone)?;
            let last = out.record.final_last().unwrap_or(0.0);
            totals[i] += last;
            retrieval += out.retrieval_accuracy.unwrap_or(0.0);
            row.push(format!("{last:.4}"));
        }
        println!("{}", row.join(","));
    }
    let n = AVERAGE_SEEDS.len() as f64;
    let means: Vec<String> = totals.iter().map(|t| format!("{:.4}", t / n)).collect();
    println!("mean,{}", means.join(","));
    println!("prop - finetune margin {:.1} pp", 100.0 * (totals[0] - totals[3]) / n);
    println!("kv retrieval accuracy {:.4}", retrieval / n);

    let stream = make_task_stream(&data.stream, config.init_classes, config.inc_classes, config.seed)?;
    for lambda in [config.lambda, 0.0] {
        let mut m = PromptPrototypeModel::new(backbone.clone(), TrainConfig { lambda, ..config.train() })?;
        let o = m.learn_task(&stream.tasks[0])?;
        println!("lambda {lambda}: prompt norm after task 0 {:.3e}", prompt_l2(&o.prompt));
    }
    Ok(())
}
