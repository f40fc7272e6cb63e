//! countlab: synthetic IHC counting lab.
//!
//! Subcommands cover the full pipeline: generate data, agglomerate teachers
//! into a student, fine-tune the counting head, evaluate, predict on single
//! images, and run the strategy ablation.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use countlab_core::commands;
use countlab_core::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "countlab",
    version,
    about = "Multi-class density counting for IHC-like images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (images + annotations.json)
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill the teacher pool into the student encoder
    Agglomerate {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (contains annotations.json)
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune the counting head on the frozen student
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Student checkpoint from `agglomerate`
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a fine-tuned checkpoint on the held-out split
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON output path
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict densities, counts, and centroids for one image
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare agglomeration strategies (rats / equal / tdrop) at one seed
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.run.seed = s;
        cfg.data.synth.seed = s;
    }
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let ann = commands::cmd_gen_data(&cfg, &out)?;
            println!(
                "wrote {} images, annotations at {}",
                cfg.data.images,
                ann.display()
            );
        }
        Command::Agglomerate {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let report = commands::cmd_agglomerate(&cfg, &data, &out)?;
            println!("epoch losses: {:?}", report.epoch_losses);
            if report.batches_with_selection > 0 {
                println!(
                    "teacher selections over {} batches: {:?}",
                    report.batches_with_selection, report.selection_counts
                );
            }
            println!("checkpoint: {}", out.display());
        }
        Command::Finetune {
            config,
            student,
            data,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let report = commands::cmd_finetune(&cfg, &student, &data, &out)?;
            for (i, e) in report.epoch_losses.iter().enumerate() {
                println!(
                    "epoch {i}: total {:.5} (count {:.5}, se {:.5})",
                    e.total, e.count_part, e.se_part
                );
            }
            println!("checkpoint: {}", out.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            report,
        } => {
            let rep = commands::cmd_evaluate(&checkpoint, &data, &report)?;
            for (k, v) in &rep.metrics {
                println!("{k}: {v:.4}");
            }
            if let Some(q) = rep.qwk_grades {
                println!("QWK (expression grades): {q:.4}");
            }
            println!("report: {}", report.display());
        }
        Command::Predict {
            checkpoint,
            image,
            out,
        } => {
            let rep = commands::cmd_predict(&checkpoint, &image, &out)?;
            for (name, count) in &rep.counts {
                println!("{name}: {count:.2}");
            }
            println!("TPS: {:.4}", rep.tps);
            println!("outputs in {}", out.display());
        }
        Command::Ablate {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let table = commands::cmd_ablate(&cfg, &data, &out)?;
            println!(
                "{:<8} {:>8} {:>8} {:>8} {:>8}",
                "strategy", "NM", "PM", "TM", "WM"
            );
            for r in &table.rows {
                println!(
                    "{:<8} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                    r.strategy, r.nm, r.pm, r.tm, r.wm
                );
            }
        }
    }
    Ok(())
}
