//! Dataset generation: JSONL files of task examples, deterministic per
//! seed (example i uses a splitmix-style derived seed).

use crate::Outcome;
use clap::{Args, Subcommand};
use path_attn::tasks::{
    self, FFLM_P_IGNORE_DENSE, FFLM_P_IGNORE_ID, FFLM_P_IGNORE_SPARSE,
};
use path_attn::{PathError, Result, TaskExample};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[command(subcommand)]
    pub task: GenTask,
}

#[derive(Debug, Args, Serialize)]
pub struct CommonGen {
    /// Number of examples
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSONL file (default: <outdir>/<task>.jsonl)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum GenTask {
    /// Flip-flop write/read/ignore stream
    Fflm {
        #[command(flatten)]
        common: CommonGen,
        /// Token count (even: instruction/bit pairs)
        #[arg(long, default_value_t = 64)]
        length: usize,
        /// id (0.8), sparse (0.98), or dense (0.10)
        #[arg(long)]
        preset: Option<String>,
        /// Explicit ignore probability (overrides --preset)
        #[arg(long)]
        p_ignore: Option<f64>,
    },
    /// Alternating-group word problem with per-prefix identity labels
    A5 {
        #[command(flatten)]
        common: CommonGen,
        #[arg(long, default_value_t = 32)]
        length: usize,
    },
    /// '#'-prefixed swap words with a final identity label
    Swap {
        #[command(flatten)]
        common: CommonGen,
        /// Number of swap tokens after '#'
        #[arg(long, default_value_t = 48)]
        swaps: usize,
    },
    /// Multi-query recall of the n-th most recent assignment
    Mqrar {
        #[command(flatten)]
        common: CommonGen,
        #[arg(long, default_value_t = 1)]
        n_back: usize,
        #[arg(long, default_value_t = 4)]
        num_vars: usize,
        #[arg(long, default_value_t = 16)]
        num_pairs: usize,
    },
}

impl GenTask {
    pub fn common(&self) -> &CommonGen {
        match self {
            GenTask::Fflm { common, .. }
            | GenTask::A5 { common, .. }
            | GenTask::Swap { common, .. }
            | GenTask::Mqrar { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GenTask::Fflm { .. } => "fflm",
            GenTask::A5 { .. } => "a5",
            GenTask::Swap { .. } => "swap",
            GenTask::Mqrar { .. } => "mqrar",
        }
    }
}

pub fn preset_p_ignore(name: &str) -> Result<f64> {
    Ok(match name {
        "id" => FFLM_P_IGNORE_ID,
        "sparse" => FFLM_P_IGNORE_SPARSE,
        "dense" => FFLM_P_IGNORE_DENSE,
        other => {
            return Err(PathError::InvalidParameter(format!(
                "unknown preset '{other}' (expected id, sparse, dense)"
            )))
        }
    })
}

fn derived_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(i as u64)
}

pub fn generate(task: &GenTask) -> Result<Vec<TaskExample>> {
    let common = task.common();
    let mut out = Vec::with_capacity(common.count);
    for i in 0..common.count {
        let seed = derived_seed(common.seed, i);
        out.push(match task {
            GenTask::Fflm {
                length,
                preset,
                p_ignore,
                ..
            } => {
                let p = match (p_ignore, preset) {
                    (Some(p), _) => *p,
                    (None, Some(name)) => preset_p_ignore(name)?,
                    (None, None) => FFLM_P_IGNORE_ID,
                };
                tasks::gen_fflm(*length, p, seed)?
            }
            GenTask::A5 { length, .. } => tasks::gen_a5_word(*length, seed)?,
            GenTask::Swap { swaps, .. } => tasks::gen_swap_sequence(*swaps, seed)?,
            GenTask::Mqrar {
                n_back,
                num_vars,
                num_pairs,
                ..
            } => tasks::gen_mqrar(*n_back, *num_vars, *num_pairs, 2 * num_pairs, seed)?,
        });
    }
    Ok(out)
}

pub fn run(args: &GenArgs, outdir: &Path) -> Result<Outcome> {
    let examples = generate(&args.task)?;
    std::fs::create_dir_all(outdir)?;
    let path = args
        .task
        .common()
        .out
        .clone()
        .unwrap_or_else(|| outdir.join(format!("{}.jsonl", args.task.name())));
    let mut file = std::fs::File::create(&path)?;
    tasks::write_jsonl(&mut file, &examples)?;
    Ok(Outcome {
        passed: true,
        summary: format!(
            "wrote {} {} examples to {}",
            examples.len(),
            args.task.name(),
            path.display()
        ),
    })
}
