use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use prop_core::harness::ablation::run_settings;
use prop_core::harness::config::AVERAGE_SEEDS;
use prop_core::harness::experiment::{obtain_backbone, sha256_hex, write_run_artifacts};
use prop_core::harness::profiler::{profile, profile_csv, seeded_backbone};
use prop_core::harness::{
    ablation, export_embeddings, make_task_stream, prepare_data, pretrain_backbone, run_method, Axis, ExperimentConfig,
    Method, PreparedData,
};
use prop_core::io::write_atomic;
use prop_core::learner::fused_feature;
use prop_core::{Checkpoint, Error, PromptPrototypeModel, Result};

#[derive(Parser, Debug)]
#[command(name = "prop", version, about = "Prompt-prototype continual learning experiments")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// PROPCKPT file: a backbone to start from, or a trained model for
    /// export-embeddings.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory (manifest.tsv + raw matrices, or data.csv).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Generate Gaussian-cluster data from the config (the default when no
    /// data directory is given).
    #[arg(long, global = true)]
    synthetic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain and freeze a backbone on the held-out base classes.
    Pretrain,
    /// Run prompt-prototype learning over the task stream.
    Run,
    /// Run a reference method over the task stream.
    Baseline {
        #[arg(value_enum)]
        method: BaselineArg,
    },
    /// Seed-averaged sweep over one axis.
    Ablate {
        #[arg(value_enum)]
        axis: AxisArg,
        /// Comma-separated seeds (default 1993..=1997).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Closed-form and measured inference cost for several task counts.
    Profile {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
        tasks: Vec<usize>,
    },
    /// PCA projection of test features and prototypes.
    ExportEmbeddings,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BaselineArg {
    Finetune,
    Kv,
    Ncm,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AxisArg {
    Lambda,
    PromptLen,
    LossComponents,
    Fusion,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Lambda => Axis::Lambda,
            AxisArg::PromptLen => Axis::PromptLen,
            AxisArg::LossComponents => Axis::LossComponents,
            AxisArg::Fusion => Axis::Fusion,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if cli.synthetic && cli.data_dir.is_some() {
        return Err(Error::Config("--synthetic and --data-dir are mutually exclusive".into()));
    }
    config.validate()?;
    Ok(config)
}

fn data(cli: &Cli, config: &ExperimentConfig) -> Result<PreparedData> {
    prepare_data(config, cli.data_dir.as_deref())
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Pretrain => {
            let d = data(cli, &config)?;
            let p = pretrain_backbone(&d.base, &d.stream.classes(), config.encoder(), &config.pretrain())?;
            std::fs::create_dir_all(out)?;
            let base: BTreeSet<_> = d.base.iter().map(|s| s.y).collect();
            let bytes = Checkpoint::from_backbone(&p.params).with_base_classes(&base)?.to_bytes()?;
            write_atomic(&out.join("backbone.ckpt"), &bytes)?;
            let mut manifest = config.to_text();
            manifest.push_str(&format!(
                "base_train_accuracy = {:.6}\nbackbone_sha256 = {}\ncheckpoint_sha256 = {}\ndata_sha256 = {}\n",
                p.train_accuracy,
                p.params.content_hash(),
                sha256_hex(&bytes),
                d.hash
            ));
            write_atomic(&out.join("manifest.txt"), manifest.as_bytes())?;
            println!("base train accuracy {:.4}; wrote {}", p.train_accuracy, out.join("backbone.ckpt").display());
        }
        Command::Run => experiment(cli, &config, Method::Prop)?,
        Command::Baseline { method } => {
            let m = match method {
                BaselineArg::Finetune => Method::Finetune,
                BaselineArg::Kv => Method::Kv,
                BaselineArg::Ncm => Method::Ncm,
            };
            experiment(cli, &config, m)?;
        }
        Command::Ablate { axis, seeds } => {
            let axis = Axis::from(*axis);
            let seeds = if seeds.is_empty() { AVERAGE_SEEDS.to_vec() } else { seeds.clone() };
            let d = data(cli, &config)?;
            let backbone = obtain_backbone(&config, &d, cli.checkpoint.as_deref())?;
            let table = run_settings(axis, &ablation::settings(axis, &config), &seeds, &d, &backbone)?;
            let csv = table.to_csv();
            write_atomic(&out.join(format!("ablation_{axis}.csv")), csv.as_bytes())?;
            print!("{csv}");
        }
        Command::Profile { tasks } => {
            let params = match &cli.checkpoint {
                Some(p) => Checkpoint::load(p)?.backbone()?,
                None => seeded_backbone(config.encoder(), config.pretrain_seed)?,
            };
            let rows = profile(&params, config.prompt_len, tasks, config.seed)?;
            let csv = profile_csv(&rows);
            write_atomic(&out.join("profile.csv"), csv.as_bytes())?;
            print!("{csv}");
        }
        Command::ExportEmbeddings => export(cli, &config, out)?,
    }
    Ok(())
}

fn experiment(cli: &Cli, config: &ExperimentConfig, method: Method) -> Result<()> {
    let d = data(cli, config)?;
    let backbone = obtain_backbone(config, &d, cli.checkpoint.as_deref())?;
    let stream = make_task_stream(&d.stream, config.init_classes, config.inc_classes, config.seed)?;
    let result = run_method(config, method, &stream, &backbone)?;
    write_run_artifacts(&cli.out_dir, config, &result, &stream, &d.hash)?;
    print!("{}", result.record.to_csv());
    if let Some(r) = result.retrieval_accuracy {
        println!("retrieval accuracy {r:.4}");
    }
    Ok(())
}

fn export(cli: &Cli, config: &ExperimentConfig, out: &Path) -> Result<()> {
    let d = data(cli, config)?;
    let stream = make_task_stream(&d.stream, config.init_classes, config.inc_classes, config.seed)?;
    let trained = match &cli.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.tensors.contains_key("meta.fusion") {
                Some(ckpt.into_model(config.train())?.0)
            } else {
                None
            }
        }
        None => None,
    };
    let model: PromptPrototypeModel = match trained {
        Some(m) => m,
        None => {
            let backbone = obtain_backbone(config, &d, cli.checkpoint.as_deref())?;
            let mut m = PromptPrototypeModel::new(backbone, config.train())?;
            for t in &stream.tasks {
                m.learn_task(t)?;
            }
            m
        }
    };
    let bank = model.bank();
    let mut features = Vec::new();
    for (class, entry) in bank.entries() {
        let prompt = model
            .prompts()
            .iter()
            .find(|p| p.task_id == entry.task_id)
            .ok_or_else(|| Error::Contract(format!("no prompt for task {}", entry.task_id)))?;
        for s in stream.tasks.iter().flat_map(|t| &t.test).filter(|s| s.y == class) {
            let frozen = model.params().encode(&s.x, None)?;
            let f = fused_feature(model.params(), prompt, &frozen, &s.x, bank.fusion())?;
            features.push((f.into_data(), class));
        }
    }
    let prototypes: Vec<_> = bank.entries().map(|(c, e)| (e.fused.data().to_vec(), c)).collect();
    let path = out.join("embeddings.csv");
    let points = export_embeddings(&features, &prototypes, Some(&path))?;
    println!("wrote {} points to {}", points.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_config() {
                2
            } else if e.is_protocol() {
                3
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}
