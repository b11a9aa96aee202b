//! Tiny training runs: dataset from a JSONL file or generated in
//! process, metrics CSV and a binary checkpoint as outputs.

use crate::Outcome;
use clap::Args;
use path_attn::tasks::{self, TaskExample};
use path_attn::train::{self, Mode, TrainConfig};
use path_attn::{PathError, Result};
use serde::Serialize;
use std::io::BufReader;
use std::path::{Path, PathBuf};

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// fflm, a5, swap, or mqrar
    #[arg(long, default_value = "fflm")]
    pub task: String,
    /// JSONL dataset; generated in process when omitted
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// path, path-fox, rope, nope, or fox
    #[arg(long, default_value = "path")]
    pub mode: String,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub rank: usize,
    /// Examples to generate when --data is omitted
    #[arg(long, default_value_t = 256)]
    pub dataset_size: usize,
    /// Length parameter for generated examples
    #[arg(long, default_value_t = 32)]
    pub example_length: usize,
    /// Metrics CSV (default: <outdir>/train_metrics.csv)
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    /// Checkpoint file (default: <outdir>/checkpoint.bin)
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
}

fn default_dataset(args: &TrainArgs) -> Result<Vec<TaskExample>> {
    let mut out = Vec::with_capacity(args.dataset_size);
    for i in 0..args.dataset_size {
        let seed = args
            .seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(i as u64);
        out.push(match args.task.as_str() {
            "fflm" => tasks::gen_fflm(args.example_length, 0.8, seed)?,
            "a5" => tasks::gen_a5_word(args.example_length, seed)?,
            "swap" => tasks::gen_swap_sequence(args.example_length, seed)?,
            "mqrar" => {
                let pairs = (args.example_length / 2).max(2);
                tasks::gen_mqrar(1, 4, pairs, 2 * pairs, seed)?
            }
            other => {
                return Err(PathError::InvalidParameter(format!(
                    "unknown task '{other}' (expected fflm, a5, swap, mqrar)"
                )))
            }
        });
    }
    Ok(out)
}

/// Smallest vocabulary covering every token and target in the dataset.
fn vocab_of(dataset: &[TaskExample]) -> usize {
    dataset
        .iter()
        .flat_map(|ex| {
            ex.tokens
                .iter()
                .copied()
                .chain(ex.targets.iter().filter_map(|t| *t))
        })
        .max()
        .map_or(1, |m| m + 1)
}

pub fn run(args: &TrainArgs, outdir: &Path) -> Result<Outcome> {
    let mode = Mode::parse(&args.mode)?;
    let dataset = match &args.data {
        Some(path) => tasks::read_jsonl(BufReader::new(std::fs::File::open(path)?))?,
        None => default_dataset(args)?,
    };
    if dataset.is_empty() {
        return Err(PathError::InvalidParameter("dataset is empty".into()));
    }
    let mut cfg = TrainConfig::new(vocab_of(&dataset), &args.task);
    cfg.mode = mode;
    cfg.seed = args.seed;
    cfg.layers = args.layers;
    cfg.heads = args.heads;
    cfg.dim = args.dim;
    cfg.rank = args.rank;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }

    let (model, log) = train::train(cfg, &dataset)?;
    std::fs::create_dir_all(outdir)?;
    let metrics_path = args
        .metrics_out
        .clone()
        .unwrap_or_else(|| outdir.join("train_metrics.csv"));
    std::fs::write(&metrics_path, train::metrics_csv(&log))?;
    let ckpt_path = args
        .checkpoint_out
        .clone()
        .unwrap_or_else(|| outdir.join("checkpoint.bin"));
    let mut ckpt = std::fs::File::create(&ckpt_path)?;
    train::save_checkpoint(&mut ckpt, &model)?;

    let eval = train::evaluate(&model, &dataset)?;
    let final_loss = log.last().map_or(f64::NAN, |r| r.loss);
    let eval_str = match eval {
        Some(acc) => format!("{acc:.4}"),
        None => "undefined (no supervised positions)".into(),
    };
    println!(
        "train task={} mode={} steps={} final_loss={final_loss:.6} dataset_accuracy={eval_str}",
        args.task,
        args.mode,
        log.len()
    );
    println!("metrics: {}", metrics_path.display());
    println!("checkpoint: {}", ckpt_path.display());
    Ok(Outcome {
        passed: true,
        summary: format!(
            "trained task={} mode={} steps={} final_loss={final_loss:.6} accuracy={eval_str}",
            args.task,
            args.mode,
            log.len()
        ),
    })
}
