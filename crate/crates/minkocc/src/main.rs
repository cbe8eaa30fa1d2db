use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use minkocc::grid::GridConfig;
use minkocc::sim::{generate_dataset, load_dataset, GenConfig};
use minkocc::train::{
    bench, evaluate, load_checkpoint, merge_json, render_views, set_json_path, train, EvalSplit,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "minkocc", about = "Sparse 3D occupancy: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        /// Grid preset: desk, desk-fine or paper.
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        boxes: Option<usize>,
        #[arg(long)]
        cylinders: Option<usize>,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON config file; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config field, e.g. --set lr=0.001 or
        /// --set model.unet_channels=[8,16]. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Resume from a checkpoint written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: EvalSplit,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Measure per-frame inference latency.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: EvalSplit,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render one frame's cameras to PPM images.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Frame name, or a bare index into the dataset's frame list.
        #[arg(long)]
        frame: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn build_config(config: Option<&PathBuf>, sets: &[String]) -> anyhow::Result<TrainConfig> {
    // Start from the full default document so partial files and overrides
    // never leave a nested struct half-specified.
    let mut value = serde_json::to_value(TrainConfig::default())?;
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let patch: serde_json::Value =
            serde_json::from_str(&text).context("parsing config file")?;
        merge_json(&mut value, &patch);
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .with_context(|| format!("override {s:?} is not KEY=VALUE"))?;
        set_json_path(&mut value, key.trim(), raw.trim())?;
    }
    Ok(TrainConfig::from_json(&value.to_string())?)
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData {
            out,
            seed,
            frames,
            val_fraction,
            preset,
            boxes,
            cylinders,
        } => {
            let mut cfg = GenConfig {
                seed,
                frames,
                val_fraction,
                ..GenConfig::default()
            };
            cfg.scene.grid = GridConfig::preset(&preset)?;
            if let Some(b) = boxes {
                cfg.scene.n_box = b;
            }
            if let Some(c) = cylinders {
                cfg.scene.n_cyl = c;
            }
            let (manifest, dropped) = generate_dataset(&cfg, &out)?;
            println!(
                "wrote {} frames ({} train, {} val) to {}, {} primitives dropped",
                frames,
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                out.display(),
                dropped
            );
        }
        Command::Train {
            data,
            out,
            config,
            sets,
            resume,
        } => {
            let cfg = build_config(config.as_ref(), &sets)?;
            let dataset = load_dataset(&data)?;
            let summary = train(&cfg, &dataset, &out, resume.as_deref())?;
            println!(
                "{} steps ({} warm), final loss {:.4}, log {}",
                summary.steps,
                summary.warm_steps,
                summary.final_total,
                summary.log_path.display()
            );
            if let Some(last) = summary.checkpoints.last() {
                println!("last checkpoint: {}", last.display());
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            json,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let report = evaluate(&ckpt, &dataset, split)?;
            print!("{}", report.to_table());
            if let Some(path) = json {
                fs::write(&path, report.to_json()?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Bench {
            checkpoint,
            data,
            split,
            repeats,
            warmup,
            json,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let report = bench(&ckpt, &dataset, split, repeats, warmup)?;
            print!("{}", report.to_table());
            if let Some(path) = json {
                fs::write(&path, report.to_json()?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Render {
            checkpoint,
            data,
            frame,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let name = match frame.parse::<usize>() {
                Ok(i) => dataset
                    .frame_names()
                    .nth(i)
                    .with_context(|| format!("frame index {i} out of range"))?
                    .to_string(),
                Err(_) => frame,
            };
            for path in render_views(&ckpt, &dataset, &name, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}
