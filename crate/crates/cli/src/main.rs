use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use pseudoseg_core::experiment::{
    evaluate_checkpoint, prepare_data, run_ablation, run_selftrain, run_training, write_splits,
};
use pseudoseg_core::{deterministic_from_env, Error, ExperimentConfig, RunOptions, Study, TrainMode};

#[derive(Parser, Debug)]
#[command(name = "pseudoseg", version, about = "Semi-supervised segmentation with structured pseudo labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the split seed and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-threaded, bitwise reproducible execution. Also enabled by
    /// PSEUDOSEG_DETERMINISTIC=1.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample labeled/unlabeled splits and write them as JSON.
    MakeSplits {
        #[command(flatten)]
        common: Common,
        /// Comma-separated split seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// unlabeled, image_level or supervised_only.
        #[arg(long)]
        mode: Option<TrainMode>,
    },
    /// Evaluate a checkpoint on the validation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run one ablation study over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// sources, hypercolumn, soft_hard, sharpening, jitter_strength or backbone.
        #[arg(long)]
        study: Study,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Teacher, offline self-training student, and PseudoSeg on one split.
    Selftrain {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn options(common: &Common) -> RunOptions {
    RunOptions { deterministic: common.deterministic || deterministic_from_env() }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::MakeSplits { common, seeds } => {
            let cfg = load_config(&common)?;
            for path in write_splits(&cfg, &seeds, &cfg.output_dir)? {
                println!("{}", path.display());
            }
        }
        Command::Train { common, mode } => {
            let mut cfg = load_config(&common)?;
            if let Some(mode) = mode {
                cfg.train.mode = mode;
            }
            let data = prepare_data(&cfg)?;
            let summary = run_training(&cfg, &data, Some(&cfg.output_dir), options(&common))?;
            println!(
                "final mIoU {:.4} (best {:.4}), ECE {:.4}; outputs in {}",
                summary.final_eval.miou,
                summary.best_miou,
                summary.final_eval.ece,
                cfg.output_dir.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let report = evaluate_checkpoint(&cfg, &checkpoint)?;
            let path = cfg.output_dir.join("eval.json");
            write_json(&path, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { common, study, seeds } => {
            let cfg = load_config(&common)?;
            let rows = run_ablation(&cfg, study, &seeds, &cfg.output_dir, options(&common))?;
            for r in rows {
                println!("{}\t{}\tseed {}\tmIoU {:.4}", r.study, r.arm, r.seed, r.miou);
            }
        }
        Command::Selftrain { common } => {
            let cfg = load_config(&common)?;
            for r in run_selftrain(&cfg, &cfg.output_dir, options(&common))? {
                println!("{}\tmIoU {:.4}", r.method, r.miou);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
