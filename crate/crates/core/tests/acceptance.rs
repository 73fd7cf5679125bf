//! Acceptance suite. Runs as a plain binary (`harness = false`) so the
//! per-criterion report is printed by `cargo test` without `--nocapture`.
//! Hard criteria fail the process; criterion 7 only warns.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prop_core::baselines::{kv_predict, KvModel};
use prop_core::harness::config::AVERAGE_SEEDS;
use prop_core::harness::experiment::{obtain_backbone, PreparedData};
use prop_core::harness::metrics::{evaluate_seen, run_stream};
use prop_core::harness::profiler::{profile, seeded_backbone};
use prop_core::harness::{
    flop_estimate, make_task_stream, prepare_data, run_experiment, run_method, AccuracyRecord, CostModel,
    ExperimentConfig, Method, RunOptions, TaskStream,
};
use prop_core::learner::{objective, HEAD_BIAS, HEAD_WEIGHT};
use prop_core::prototype::similarity_scores;
use prop_core::{
    Checkpoint, EncoderConfig, EncoderParams, Error, FusionStrategy, PromptMode, PromptPrototypeModel, PromptSharing,
    Sample, Task, TaskPrompt, Tensor,
};

type Check = Result<(), String>;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Warn,
    Fail,
}

struct Report {
    rows: Vec<(usize, Status, String)>,
}

impl Report {
    fn record(&mut self, id: usize, hard: bool, title: &str, started: Instant, result: Check, detail: String) {
        let secs = started.elapsed().as_secs_f64();
        let (status, text) = match result {
            Ok(()) => (Status::Pass, format!("{title}: {detail} [{secs:.1}s]")),
            Err(why) => (
                if hard { Status::Fail } else { Status::Warn },
                format!("{title}: {why}; {detail} [{secs:.1}s]"),
            ),
        };
        let tag = match status {
            Status::Pass => "PASS",
            Status::Warn => "WARN",
            Status::Fail => "FAIL",
        };
        println!("criterion {id:>2} {tag} {text}");
        self.rows.push((id, status, text));
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- 1

fn flat(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct GradCase {
    seed: u64,
    mode: PromptMode,
    sharing: PromptSharing,
    prompt_len: usize,
    lambda: f64,
    classes: usize,
    batch: usize,
}

/// Worst relative error `|a - n| / max(|a|, |n|)` over the concatenated
/// prompt-and-head gradient vector of one configuration.
fn gradient_case(c: &GradCase) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let enc = EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 8,
        seq_len: 4,
        input_dim: 6,
        ffn_mult: 2,
        prompt_mode: c.mode,
        prompt_sharing: c.sharing,
    };
    let mut params = EncoderParams::init(enc, &mut rng).map_err(|e| e.to_string())?;
    params.freeze();
    let prompt = TaskPrompt::init(0, &enc, c.prompt_len, &mut rng).map_err(|e| e.to_string())?;
    // Larger than the training init so the head and prompt terms are not
    // vanishingly small.
    let prompt = TaskPrompt::from_blocks(0, prompt.blocks().iter().map(|b| b.scale(20.0)).collect())
        .map_err(|e| e.to_string())?;
    let head = BTreeMap::from([
        (HEAD_WEIGHT.to_string(), Tensor::randn(&[8, c.classes], 0.5, &mut rng)),
        (HEAD_BIAS.to_string(), Tensor::randn(&[c.classes], 0.5, &mut rng)),
    ]);
    let tokens: Vec<Tensor> = (0..c.batch)
        .map(|_| {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            params.tokenize(&x)
        })
        .collect::<prop_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let refs: Vec<&Tensor> = tokens.iter().collect();
    let labels: Vec<usize> = (0..c.batch).map(|i| i % c.classes).collect();

    let (_, grads) = objective(&params, &prompt, &head, &refs, &labels, c.lambda).map_err(|e| e.to_string())?;
    let total = |p: &TaskPrompt, h: &BTreeMap<String, Tensor>| -> f64 {
        objective(&params, p, h, &refs, &labels, c.lambda).expect("objective").0.total
    };
    let h = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();

    let named = prompt.named();
    for (name, value) in &named {
        let g = grads.get(name).ok_or_else(|| format!("no gradient for {name}"))?;
        analytic.extend(flat(g));
        for i in 0..value.numel() {
            let at = |delta: f64| {
                let mut m = named.clone();
                m.get_mut(name).expect("present").data_mut()[i] += delta;
                let mut p = prompt.clone();
                p.update(&m).expect("update");
                total(&p, &head)
            };
            numeric.push((at(h) - at(-h)) / (2.0 * h));
        }
    }
    for (name, value) in &head {
        let g = grads.get(name).ok_or_else(|| format!("no gradient for {name}"))?;
        analytic.extend(flat(g));
        for i in 0..value.numel() {
            let at = |delta: f64| {
                let mut m = head.clone();
                m.get_mut(name).expect("present").data_mut()[i] += delta;
                total(&prompt, &m)
            };
            numeric.push((at(h) - at(-h)) / (2.0 * h));
        }
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    Ok(if scale == 0.0 { 0.0 } else { norm(&diff) / scale })
}

fn criterion_1(report: &mut Report) {
    let started = Instant::now();
    let modes = [PromptMode::Concat, PromptMode::Prefix, PromptMode::Masked];
    let sharings = [PromptSharing::PerLayer, PromptSharing::Shared];
    let lambdas = [0.0, 0.1, 1.0];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let result = (|| {
        for seed in 0..24u64 {
            let case = GradCase {
                seed,
                mode: modes[seed as usize % 3],
                sharing: sharings[(seed as usize / 3) % 2],
                prompt_len: [1, 3, 5][(seed as usize / 6) % 3],
                lambda: lambdas[(seed as usize / 2) % 3],
                classes: 2 + seed as usize % 3,
                batch: 1 + seed as usize % 4,
            };
            let err = gradient_case(&case)?;
            worst = worst.max(err);
            count += 1;
            if err >= 1e-4 {
                return Err(format!("seed {seed}: relative error {err:.3e}"));
            }
        }
        Ok(())
    })();
    let secs = started.elapsed().as_secs_f64();
    let result = result.and_then(|()| ensure(secs < 60.0, format!("took {secs:.1}s")));
    report.record(
        1,
        true,
        "gradient check",
        started,
        result,
        format!("{count} configurations, worst relative error {worst:.2e}"),
    );
}

// ---------------------------------------------------------------- shared runs

struct SeedRuns {
    seed: u64,
    stream: TaskStream,
    prop: AccuracyRecord,
    prop_model: PromptPrototypeModel,
    kv: AccuracyRecord,
    kv_retrieval: f64,
    finetune: AccuracyRecord,
    ce_only: f64,
    prompt_len_1: f64,
    /// Frozen-backbone hash, old prompts and old prototypes stayed fixed.
    frozen_ok: Result<(), String>,
}

fn run_seed(config: &ExperimentConfig, data: &PreparedData, backbone: &EncoderParams, seed: u64) -> prop_core::Result<SeedRuns> {
    let config = ExperimentConfig { seed, ..config.clone() };
    let stream = make_task_stream(&data.stream, config.init_classes, config.inc_classes, seed)?;
    let hash = backbone.content_hash();

    let mut kv_model = KvModel::new(backbone.clone(), config.train())?;
    let mut prop = AccuracyRecord::new();
    let mut snapshots: Vec<(TaskPrompt, Vec<(u32, prop_core::PrototypeEntry)>)> = Vec::new();
    let mut frozen_ok = Ok(());
    let kv = run_stream(&mut kv_model, &stream.tasks, |t, m| {
        let inner = m.inner();
        let (last, per_task) = evaluate_seen(inner, &stream.tasks[..=t])?;
        prop.push(last, per_task)?;
        if inner.params().content_hash() != hash && frozen_ok.is_ok() {
            frozen_ok = Err(format!("backbone hash changed after task {t}"));
        }
        for (i, (prompt, entries)) in snapshots.iter().enumerate() {
            let same_prompt = inner.prompts().iter().find(|p| p.task_id == prompt.task_id) == Some(prompt);
            let same_entries = entries.iter().all(|(c, e)| inner.bank().get(*c) == Some(e));
            if !(same_prompt && same_entries) && frozen_ok.is_ok() {
                frozen_ok = Err(format!("task {i} state changed while training task {t}"));
            }
        }
        let task_id = stream.tasks[t].id;
        let prompt = inner
            .prompts()
            .iter()
            .find(|p| p.task_id == task_id)
            .cloned()
            .ok_or(Error::Contract("missing prompt".into()))?;
        let entries = inner
            .bank()
            .entries()
            .filter(|(_, e)| e.task_id == task_id)
            .map(|(c, e)| (c, e.clone()))
            .collect();
        snapshots.push((prompt, entries));
        Ok(())
    })?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (t, task) in stream.tasks.iter().enumerate() {
        for s in &task.test {
            hits += usize::from(kv_model.predict(&s.x)?.selected_task == t);
            total += 1;
        }
    }

    let finetune = run_method(&config, Method::Finetune, &stream, backbone)?.record;
    let final_last = |c: ExperimentConfig| -> prop_core::Result<f64> {
        Ok(run_method(&c, Method::Prop, &stream, backbone)?.record.final_last().unwrap_or(0.0))
    };
    let ce_only = final_last(ExperimentConfig { lambda: 0.0, ..config.clone() })?;
    let prompt_len_1 = final_last(ExperimentConfig { prompt_len: 1, ..config.clone() })?;

    Ok(SeedRuns {
        seed,
        stream,
        prop,
        prop_model: kv_model.inner().clone(),
        kv,
        kv_retrieval: hits as f64 / total as f64,
        finetune,
        ce_only,
        prompt_len_1,
        frozen_ok,
    })
}

// ---------------------------------------------------------------- 2

fn criterion_2(report: &mut Report, runs: &SeedRuns, backbone: &EncoderParams) {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let result = (|| -> Check {
        let m = &runs.prop_model;
        for task in &runs.stream.tasks {
            let prompt = m.prompts().iter().find(|p| p.task_id == task.id).ok_or("missing prompt")?;
            for &c in &task.classes {
                let entry = m.bank().get(c).ok_or(format!("class {c} has no prototype"))?;
                let samples: Vec<&Sample> = task.train.iter().filter(|s| s.y == c).collect();
                let brute = |p: Option<&TaskPrompt>| -> Vec<f64> {
                    let mut acc = vec![0.0; m.params().config().model_dim];
                    for s in &samples {
                        for (a, v) in acc.iter_mut().zip(m.params().encode(&s.x, p).expect("encode").data()) {
                            *a += v;
                        }
                    }
                    acc.iter().map(|a| a / samples.len() as f64).collect()
                };
                for (stored, oracle) in [(&entry.prompted, brute(Some(prompt))), (&entry.frozen, brute(None))] {
                    for (a, b) in stored.data().iter().zip(&oracle) {
                        worst = worst.max((a - b).abs());
                    }
                }
                checked += 1;
            }
        }
        ensure(worst <= 1e-10, format!("max deviation {worst:.2e}"))?;

        // A class with a single training sample stores exactly its feature.
        let base = &runs.stream.tasks[0];
        let lone = base.train.iter().find(|s| s.y == base.classes[1]).ok_or("no sample")?.clone();
        let mut train: Vec<Sample> = base.train.iter().filter(|s| s.y == base.classes[0]).cloned().collect();
        train.push(lone.clone());
        let task = Task {
            id: 0,
            classes: base.classes.clone(),
            train,
            test: Vec::new(),
        };
        let mut model =
            PromptPrototypeModel::new(backbone.clone(), m.config().clone()).map_err(|e| e.to_string())?;
        model.learn_task(&task).map_err(|e| e.to_string())?;
        let entry = model.bank().get(lone.y).ok_or("lone class missing")?;
        let prompt = &model.prompts()[0];
        let exact = entry.prompted == model.params().encode(&lone.x, Some(prompt)).map_err(|e| e.to_string())?
            && entry.frozen == model.params().encode(&lone.x, None).map_err(|e| e.to_string())?;
        ensure(exact, "single-sample prototype differs from its feature")
    })();
    report.record(
        2,
        true,
        "prototype oracle",
        started,
        result,
        format!("{checked} classes, max deviation {worst:.1e}, single-sample class exact"),
    );
}

// ---------------------------------------------------------------- 3

fn criterion_3(report: &mut Report, runs: &[SeedRuns], backbone: &EncoderParams) {
    let started = Instant::now();
    let result = (|| -> Check {
        let c = *backbone.config();
        let x: Vec<f64> = (0..c.input_dim).map(|i| (i as f64).cos()).collect();
        let d = backbone.encode(&x, None).map_err(|e| e.to_string())?.numel();
        ensure(d == c.model_dim, format!("L_p=0 width {d}"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for lp in [1, 5, 20] {
            let p = TaskPrompt::init(0, &c, lp, &mut rng).map_err(|e| e.to_string())?;
            let f = backbone.encode(&x, Some(&p)).map_err(|e| e.to_string())?;
            ensure(f.shape() == [c.model_dim], format!("L_p={lp} shape {:?}", f.shape()))?;
        }
        for r in runs {
            ensure(r.stream.len() == 5, format!("seed {} stream has {} tasks", r.seed, r.stream.len()))?;
            r.frozen_ok.clone().map_err(|e| format!("seed {}: {e}", r.seed))?;
        }
        Ok(())
    })();
    report.record(
        3,
        true,
        "shape and frozen invariants",
        started,
        result,
        format!("D-wide for L_p in 0,1,5,20; hash and old tasks fixed over {} five-task runs", runs.len()),
    );
}

// ---------------------------------------------------------------- 4

fn avg_identity(r: &AccuracyRecord) -> Check {
    for t in 0..r.steps() {
        let mut sum = 0.0;
        for v in &r.last[..=t] {
            sum += v;
        }
        let oracle = sum / (t + 1) as f64;
        ensure(r.avg[t] == oracle, format!("step {t}: avg {} vs {oracle}", r.avg[t]))?;
    }
    Ok(())
}

fn criterion_4(report: &mut Report, runs: &[SeedRuns], config: &ExperimentConfig, data: &PreparedData, backbone: &EncoderParams) {
    let started = Instant::now();
    let result = (|| -> Check {
        for r in runs {
            for rec in [&r.prop, &r.kv, &r.finetune] {
                avg_identity(rec)?;
            }
        }
        let classes = data.stream.classes().len();
        let one = make_task_stream(&data.stream, classes, 1, config.seed).map_err(|e| e.to_string())?;
        ensure(one.len() == 1, "expected a single task")?;
        let out = run_method(config, Method::Ncm, &one, backbone).map_err(|e| e.to_string())?;
        ensure(out.record.avg == out.record.last, "one-task Avg differs from Last")
    })();
    report.record(
        4,
        true,
        "metric identity",
        started,
        result,
        "Avg_t is the exact running mean at every step; one task gives Avg == Last".into(),
    );
}

// ---------------------------------------------------------------- 5

/// `cargo run --release -p prop-core --example pilot` measured ProP 0.8976
/// vs finetune 0.3300 final Last (5 seeds, default stream), a 56.8 pp
/// margin. The gate sits well below it.
const FORGETTING_MARGIN: f64 = 0.20;

fn criterion_5(report: &mut Report, runs: &[SeedRuns], elapsed: f64) {
    let started = Instant::now();
    let prop = mean(&runs.iter().map(|r| r.prop.final_last().unwrap_or(0.0)).collect::<Vec<_>>());
    let ft = mean(&runs.iter().map(|r| r.finetune.final_last().unwrap_or(0.0)).collect::<Vec<_>>());
    let first: Vec<(f64, f64)> = runs.iter().map(|r| (r.finetune.per_task[0][0], r.finetune.per_task[1][0])).collect();
    let result = (|| -> Check {
        ensure(prop - ft >= FORGETTING_MARGIN, format!("margin {:.3} below {FORGETTING_MARGIN}", prop - ft))?;
        for (r, (before, after)) in runs.iter().zip(&first) {
            ensure(after < before, format!("seed {}: task-1 accuracy {before:.3} -> {after:.3}", r.seed))?;
        }
        ensure(elapsed < 300.0, format!("runs took {elapsed:.0}s"))
    })();
    let b = mean(&first.iter().map(|p| p.0).collect::<Vec<_>>());
    let a = mean(&first.iter().map(|p| p.1).collect::<Vec<_>>());
    report.record(
        5,
        true,
        "forgetting ordering",
        started,
        result,
        format!(
            "ProP Last {prop:.4} vs finetune {ft:.4} (margin {:.1} pp, gate {:.0} pp); finetune task-1 {b:.3} -> {a:.3}; runs {elapsed:.0}s",
            100.0 * (prop - ft),
            100.0 * FORGETTING_MARGIN
        ),
    );
}

// ---------------------------------------------------------------- 6

/// Two tasks whose inputs sit in far-apart regions; classes within a task
/// differ along a task-specific direction.
fn separable_stream(dim: usize, seed: u64) -> Vec<Task> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut id = 0;
    let mut draw = |centre: &[f64], n: usize, y: u32| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let x = centre.iter().map(|c| c + rng.random_range(-1.0..1.0)).collect();
                id += 1;
                Sample { id, x, y }
            })
            .collect()
    };
    (0..2usize)
        .map(|t| {
            let classes = vec![2 * t as u32, 2 * t as u32 + 1];
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (k, &y) in classes.iter().enumerate() {
                let mut centre = vec![0.0; dim];
                centre[t] = 30.0;
                centre[8 + t] = if k == 0 { 5.0 } else { -5.0 };
                train.extend(draw(&centre, 40, y));
                test.extend(draw(&centre, 20, y));
            }
            Task { id: t, classes, train, test }
        })
        .collect()
}

fn criterion_6(report: &mut Report, runs: &[SeedRuns], config: &ExperimentConfig, backbone: &EncoderParams) {
    let started = Instant::now();
    let mut detail = String::new();
    let result = (|| -> Check {
        let tasks = separable_stream(config.input_dim, config.data_seed);
        let mut kv = KvModel::new(backbone.clone(), config.train()).map_err(|e| e.to_string())?;
        for t in &tasks {
            kv.learn_task(t).map_err(|e| e.to_string())?;
        }
        let mut hits = 0;
        let mut agree = 0;
        let mut total = 0;
        for (t, task) in tasks.iter().enumerate() {
            for s in &task.test {
                let k = kv_predict(kv.inner(), kv.keys(), &s.x).map_err(|e| e.to_string())?;
                let p = kv.inner().predict(&s.x).map_err(|e| e.to_string())?;
                hits += usize::from(k.selected_task == t);
                agree += usize::from(k.class == p.class);
                total += 1;
            }
        }
        let overlap_retrieval = mean(&runs.iter().map(|r| r.kv_retrieval).collect::<Vec<_>>());
        let kv_last = mean(&runs.iter().map(|r| r.kv.final_last().unwrap_or(0.0)).collect::<Vec<_>>());
        let prop_last = mean(&runs.iter().map(|r| r.prop.final_last().unwrap_or(0.0)).collect::<Vec<_>>());
        detail = format!(
            "separable: retrieval {hits}/{total}, kv == ProP on {agree}/{total}; overlap: retrieval {overlap_retrieval:.4}, kv Last {kv_last:.4} vs ProP {prop_last:.4}"
        );
        ensure(hits == total, "separable retrieval below 100%")?;
        ensure(agree == total, "kv and ProP disagree on the separable stream")?;
        ensure(overlap_retrieval < 1.0, "overlap retrieval is perfect")?;
        ensure(kv_last <= prop_last, "kv beats ProP on the overlap stream")
    })();
    report.record(6, true, "retrieval interference", started, result, detail);
}

// ---------------------------------------------------------------- 7

fn criterion_7(report: &mut Report, runs: &[SeedRuns]) {
    let started = Instant::now();
    let avg = |f: &dyn Fn(&SeedRuns) -> f64| mean(&runs.iter().map(f).collect::<Vec<_>>());
    let ce_l2 = avg(&|r| r.prop.final_last().unwrap_or(0.0));
    let ce_only = avg(&|r| r.ce_only);
    let lp1 = avg(&|r| r.prompt_len_1);
    let fusion = |f: FusionStrategy| {
        avg(&|r| {
            let m = r.prop_model.with_fusion(f).expect("refuse");
            evaluate_seen(&m, &r.stream.tasks).expect("evaluate").0
        })
    };
    let concat = fusion(FusionStrategy::Concatenate);
    let others: Vec<(FusionStrategy, f64)> = [FusionStrategy::Sum, FusionStrategy::Average, FusionStrategy::MaxPool]
        .iter()
        .map(|&f| (f, fusion(f)))
        .collect();
    let mut warnings = Vec::new();
    if ce_l2 < ce_only {
        warnings.push(format!("CE+L2 {ce_l2:.4} < CE-only {ce_only:.4}"));
    }
    if lp1 >= ce_l2 {
        warnings.push(format!("L_p=1 {lp1:.4} >= L_p=5 {ce_l2:.4}"));
    }
    for (f, v) in &others {
        if concat < *v {
            warnings.push(format!("concatenate {concat:.4} < {f} {v:.4}"));
        }
    }
    let detail = format!(
        "CE+L2 {ce_l2:.4} vs CE-only {ce_only:.4}; L_p=1 {lp1:.4} vs L_p=5 {ce_l2:.4}; concatenate {concat:.4} vs {}",
        others.iter().map(|(f, v)| format!("{f} {v:.4}")).collect::<Vec<_>>().join(", ")
    );
    let result = if warnings.is_empty() { Ok(()) } else { Err(warnings.join("; ")) };
    report.record(7, false, "ablation directions", started, result, detail);
}

// ---------------------------------------------------------------- 8

fn criterion_8(report: &mut Report, config: &ExperimentConfig) {
    let started = Instant::now();
    let mut detail = String::new();
    let result = (|| -> Check {
        let hand = CostModel {
            tasks: 1,
            layers: 1,
            hidden_len: 8,
            prompt_len: 5,
            dim: 16,
            pool: 10,
            top_k: 1,
        };
        let e = flop_estimate(&hand).map_err(|e| e.to_string())?;
        // 1·5·16 + 1·1·(8+5)²·16
        ensure(e.prop_total == 80 + 169 * 16, format!("T=1 total {}", e.prop_total))?;
        ensure(e.prop_total == 2784, "hand value 2784")?;
        for t in [2u64, 3, 8, 100] {
            let et = flop_estimate(&CostModel { tasks: t, ..hand }).map_err(|e| e.to_string())?;
            ensure(et.prop_total == t * e.prop_total, format!("not linear at T={t}"))?;
        }
        let params = seeded_backbone(config.encoder(), config.pretrain_seed).map_err(|e| e.to_string())?;
        let rows = profile(&params, config.prompt_len, &[1, 2, 4, 8], config.seed).map_err(|e| e.to_string())?;
        let mut worst: f64 = 0.0;
        for r in &rows {
            worst = worst.max((r.ratio - 1.0).abs());
            ensure(
                r.estimate.prop_total == r.model.tasks * rows[0].estimate.prop_total,
                "measured model totals not linear",
            )?;
        }
        detail = format!(
            "T=1,L=1,L_h=8,L_p=5,D=16 -> {}; measured/formula worst deviation {:.3}% over T in 1,2,4,8",
            e.prop_total,
            100.0 * worst
        );
        ensure(worst <= 0.01, "measured MACs off by more than 1%")
    })();
    report.record(8, true, "cost model", started, result, detail);
}

// ---------------------------------------------------------------- 9

fn criterion_9(report: &mut Report, config: &ExperimentConfig) {
    let started = Instant::now();
    let result = (|| -> Check {
        let config = ExperimentConfig {
            epochs: 5,
            ..config.clone()
        };
        let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().expect("tempdir")).collect();
        let mut outs = Vec::new();
        for d in &dirs {
            let opts = RunOptions {
                out_dir: Some(d.path().to_path_buf()),
                ..RunOptions::default()
            };
            outs.push(run_experiment(&config, Method::Prop, &opts).map_err(|e| e.to_string())?);
        }
        for name in ["metrics.csv", "prop.ckpt", "manifest.txt"] {
            let a = std::fs::read(dirs[0].path().join(name)).map_err(|e| e.to_string())?;
            let b = std::fs::read(dirs[1].path().join(name)).map_err(|e| e.to_string())?;
            ensure(a == b, format!("{name} differs between runs"))?;
        }
        let ckpt = Checkpoint::load(&dirs[0].path().join("prop.ckpt")).map_err(|e| e.to_string())?;
        let (loaded, _) = ckpt.into_model(config.train()).map_err(|e| e.to_string())?;
        let original = match &outs[0].model {
            prop_core::harness::experiment::Trained::Prop(m) => m,
            _ => return Err("unexpected model kind".into()),
        };
        let data = prepare_data(&config, None).map_err(|e| e.to_string())?;
        for s in &data.stream.test.samples {
            let (a, b) = (original.predict(&s.x), loaded.predict(&s.x));
            match (a, b) {
                (Ok(a), Ok(b)) if a == b => {}
                _ => return Err(format!("prediction for sample {} changed after reload", s.id)),
            }
        }
        Ok(())
    })();
    report.record(
        9,
        true,
        "reproducibility",
        started,
        result,
        "two identical runs byte-identical; reload keeps every prediction".into(),
    );
}

// ---------------------------------------------------------------- 10

fn criterion_10(report: &mut Report, runs: &SeedRuns) {
    let started = Instant::now();
    let mut checked = 0;
    let result = (|| -> Check {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..2000 {
            let d = rng.random_range(1..12);
            let exp = rng.random_range(-8..8);
            let scale = 10f64.powi(exp);
            let draw = |rng: &mut ChaCha8Rng| {
                Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).expect("vector")
            };
            let h = draw(&mut rng);
            let protos: Vec<Tensor> = (0..rng.random_range(1..6)).map(|_| draw(&mut rng)).collect();
            let refs: Vec<&Tensor> = protos.iter().collect();
            let s = match similarity_scores(&h, &refs) {
                Ok(s) => s,
                Err(Error::ZeroNorm(_)) => continue,
                Err(e) => return Err(e.to_string()),
            };
            ensure(s.iter().all(|v| (-1.0..=1.0).contains(v)), format!("score out of range: {s:?}"))?;
            let a = rng.random_range(1e-3..1e3);
            let b = rng.random_range(1e-3..1e3);
            let scaled: Vec<Tensor> = protos.iter().map(|p| p.scale(b)).collect();
            let srefs: Vec<&Tensor> = scaled.iter().collect();
            let s2 = similarity_scores(&h.scale(a), &srefs).map_err(|e| e.to_string())?;
            ensure(argmax(&s) == argmax(&s2) || near_tie(&s), "argmax changed under rescaling")?;
            checked += 1;
        }
        let zero = Tensor::zeros(&[4]);
        let one = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
        ensure(
            matches!(similarity_scores(&zero, &[&one]), Err(Error::ZeroNorm(_))),
            "zero feature not rejected",
        )?;
        ensure(
            matches!(similarity_scores(&one, &[&zero]), Err(Error::ZeroNorm(_))),
            "zero prototype not rejected",
        )?;
        // Model-level scores on real features.
        for s in runs.stream.tasks.iter().flat_map(|t| &t.test).take(100) {
            let p = runs.prop_model.predict(&s.x).map_err(|e| e.to_string())?;
            ensure(p.scores.iter().all(|c| (-1.0..=1.0).contains(&c.score)), "model score out of range")?;
        }
        Ok(())
    })();
    report.record(
        10,
        true,
        "cosine classifier",
        started,
        result,
        format!("{checked} random cases in [-1,1] and rescaling-invariant; zero norm is a typed error"),
    );
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Rescaling may flip the order of scores that agree to rounding.
fn near_tie(v: &[f64]) -> bool {
    let best = v[argmax(v)];
    v.iter().filter(|&&x| best - x <= 1e-12).count() > 1
}

fn main() -> ExitCode {
    let total = Instant::now();
    let mut report = Report { rows: Vec::new() };
    criterion_1(&mut report);

    let config = ExperimentConfig::default();
    let data = prepare_data(&config, None).expect("synthetic data");
    let backbone = obtain_backbone(&config, &data, None).expect("pretrained backbone");
    let runs_started = Instant::now();
    let runs: Vec<SeedRuns> = AVERAGE_SEEDS
        .iter()
        .map(|&s| run_seed(&config, &data, &backbone, s).expect("seed run"))
        .collect();
    let runs_elapsed = runs_started.elapsed().as_secs_f64();

    criterion_2(&mut report, &runs[0], &backbone);
    criterion_3(&mut report, &runs, &backbone);
    criterion_4(&mut report, &runs, &config, &data, &backbone);
    criterion_5(&mut report, &runs, runs_elapsed);
    criterion_6(&mut report, &runs, &config, &backbone);
    criterion_7(&mut report, &runs);
    criterion_8(&mut report, &config);
    criterion_9(&mut report, &config);
    criterion_10(&mut report, &runs[0]);

    let failed = report.rows.iter().filter(|r| r.1 == Status::Fail).count();
    let warned = report.rows.iter().filter(|r| r.1 == Status::Warn).count();
    println!(
        "acceptance: {} pass, {warned} warn, {failed} fail in {:.0}s",
        report.rows.len() - failed - warned,
        total.elapsed().as_secs_f64()
    );
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
