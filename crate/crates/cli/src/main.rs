use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use deformseg::datagen::write_phantom_dataset;
use deformseg::engine::{fit, infer_dir};
use deformseg::metrics::{evaluate, plot_panels};
use deformseg::motionsim::simulate_dir;
use deformseg::{Checkpoint, TrainConfig};

/// Motion-artifact-robust brain tissue segmentation on synthetic phantoms.
#[derive(Parser)]
#[command(name = "deformseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate clean phantom samples.
    Phantom {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt every sample of a dataset with simulated rigid motion.
    Simulate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
        severity: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint model and write checkpoints and a loss log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a checkpoint on the corrupted stacks of a dataset.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a PNG panel per sample.
        #[arg(long)]
        panels: bool,
    },
    /// Score predictions against ground truth and write a JSON report.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Render input / corrected / defmap / mask panels.
    PlotPanels {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Phantom { count, size, seed, out } => {
            let written = write_phantom_dataset(&out, count, size, seed)?;
            println!("wrote {} samples to {}", written.len(), out.display());
        }
        Command::Simulate {
            input,
            severity,
            seed,
            out,
        } => {
            let written = simulate_dir(&input, severity, seed, &out)?;
            println!("wrote {} samples to {}", written.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let config = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            let resume = resume
                .map(|p| Checkpoint::load(&p).with_context(|| format!("loading {}", p.display())))
                .transpose()?;
            let fitted = fit(&config, &data, &out, resume)?;
            match fitted.records.last() {
                Some(last) => println!("step {} total loss {:.6}", last.step, last.total),
                None => println!("no training steps run"),
            }
            println!("checkpoint {}", fitted.checkpoint.display());
        }
        Command::Infer {
            ckpt,
            input,
            out,
            panels,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let written = infer_dir(&ckpt, &input, &out, panels)?;
            println!("wrote {} predictions to {}", written.len(), out.display());
        }
        Command::Evaluate { pred, gt, report } => {
            let rep = evaluate(&pred, &gt)?;
            rep.write(&report)?;
            println!("{}", rep.to_json());
        }
        Command::PlotPanels { input, pred, out } => {
            let written = plot_panels(&input, &pred, &out)?;
            if written.is_empty() {
                bail!("no panels rendered");
            }
            println!("wrote {} panels to {}", written.len(), out.display());
        }
    }
    Ok(())
}
