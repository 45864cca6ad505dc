use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slt_harness::config::{ExperimentConfig, ExperimentKind, Seeds};
use slt_harness::dataset::{self, DatasetKind, Dataset};
use slt_harness::experiments::{self, default_out_dir};
use slt_harness::{report, HarnessError};

/// Strong lottery ticket search in generative networks.
#[derive(Parser)]
#[command(name = "slt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed: weights = s, scores = s+1, data = s+2, eval = s+3.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path config override, e.g. `policy.k_percent=30`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset: a points CSV, or a synthetic IDX image file.
    GenData(Common),
    /// Train every weight of a randomly initialized generator.
    TrainDense(Common),
    /// Search a mask over frozen random weights.
    FindSlt(Common),
    /// Search a mask over the frozen weights of a trained checkpoint.
    PrunePretrained(Common),
    /// Train the surviving weights of a ticket under its fixed mask.
    Finetune(Common),
    /// Evaluate a stored generator.
    Eval(Common),
    /// Run a grid of ticket searches.
    Sweep(Common),
    /// Dump samples from a stored generator.
    Generate(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common, Option<ExperimentKind>) {
        match self {
            Command::GenData(c) => ("gen-data", c, None),
            Command::TrainDense(c) => ("train-dense", c, Some(ExperimentKind::TrainDense)),
            Command::FindSlt(c) => ("find-slt", c, Some(ExperimentKind::FindSlt)),
            Command::PrunePretrained(c) => ("prune-pretrained", c, Some(ExperimentKind::PrunePretrained)),
            Command::Finetune(c) => ("finetune", c, Some(ExperimentKind::Finetune)),
            Command::Eval(c) => ("eval", c, Some(ExperimentKind::Eval)),
            Command::Sweep(c) => ("sweep", c, Some(ExperimentKind::Sweep)),
            Command::Generate(c) => ("generate", c, None),
        }
    }
}

fn load(name: &str, common: &Common, kind: Option<ExperimentKind>) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(&common.config, &common.overrides)?;
    if let Some(kind) = kind {
        cfg.experiment = kind;
    }
    if let Some(s) = common.seed {
        cfg.seeds = Seeds::from_base(s);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(default_out_dir(name));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    let out = cfg.out_dir.clone().expect("set by load");
    std::fs::create_dir_all(&out)?;
    if cfg.data.kind == DatasetKind::ImageIdx {
        let path = cfg.data.idx_path.clone().unwrap_or_else(|| out.join("bars.idx"));
        dataset::write_file(&path, &dataset::synthetic_bars(cfg.sample_count, cfg.seeds.data))?;
        return Ok(path);
    }
    let data = Dataset::open(&cfg.data)?;
    let samples = data.sample(&mut slt_core::rng::seeded(cfg.seeds.data, 3), cfg.sample_count);
    let path = out.join("data.csv");
    report::write_points(&path, &samples)?;
    Ok(path)
}

fn summary<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("summary serializes")
}

fn run(command: &Command) -> Result<String, HarnessError> {
    let (name, common, kind) = command.parts();
    let cfg = load(name, common, kind)?;
    Ok(match command {
        Command::GenData(_) => format!("wrote {}", gen_data(&cfg)?.display()),
        Command::TrainDense(_) => summary(experiments::run_train_dense(&cfg)?.rows.last().expect("rows")),
        Command::FindSlt(_) => summary(experiments::run_find_slt(&cfg)?.rows.last().expect("rows")),
        Command::PrunePretrained(_) => summary(experiments::run_prune_pretrained(&cfg)?.rows.last().expect("rows")),
        Command::Finetune(_) => {
            let out = experiments::run_finetune(&cfg)?;
            format!("before {} after {}", summary(&out.before), summary(&out.after))
        }
        Command::Eval(_) => summary(&experiments::run_eval(&cfg)?),
        Command::Sweep(_) => {
            let out = experiments::run_sweep(&cfg)?;
            format!("{} cells done, {} failed", out.rows.len(), out.failures.len())
        }
        Command::Generate(_) => {
            let samples = experiments::generate_samples(&cfg)?;
            format!("generated {} samples", samples.shape()[0])
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
