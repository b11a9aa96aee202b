//! Command-line driver: verification suites, benchmarks, dataset
//! generation, hand-weighted construction checks, ring simulation, and
//! tiny training runs. Every invocation writes one JSON manifest.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error.

mod bench;
mod construct;
mod gen;
mod manifest;
mod ringcmd;
mod traincmd;
mod verify;

use clap::{Parser, Subcommand};
use path_attn::PathError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Result of a subcommand run that completed without hard errors.
pub struct Outcome {
    pub passed: bool,
    pub summary: String,
}

#[derive(Parser)]
#[command(
    name = "path-attn",
    version,
    about = "Data-dependent multiplicative position encoding: verification, benchmarks, tasks, constructions, training"
)]
struct Cli {
    /// Output directory for manifests and artifacts
    /// (falls back to $PATH_ATTN_OUTDIR, then ./runs)
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run invariant suites against their oracles
    Verify(verify::VerifyArgs),
    /// Time the attention paths and emit a CSV
    Bench(bench::BenchArgs),
    /// Generate task datasets as JSONL
    Gen(gen::GenArgs),
    /// Evaluate a hand-weighted construction
    Construct(construct::ConstructArgs),
    /// Train a tiny model and write metrics + checkpoint
    Train(traincmd::TrainArgs),
    /// Run the simulated multi-device ring and compare to the reference
    Ring(ringcmd::RingArgs),
}

fn describe(cmd: &Cmd) -> (&'static str, serde_json::Value, Option<u64>) {
    match cmd {
        Cmd::Verify(a) => ("verify", serde_json::to_value(a).unwrap(), Some(a.seed)),
        Cmd::Bench(a) => ("bench", serde_json::to_value(a).unwrap(), Some(a.seed)),
        Cmd::Gen(a) => (
            "gen",
            serde_json::to_value(a).unwrap(),
            Some(a.task.common().seed),
        ),
        Cmd::Construct(a) => ("construct", serde_json::to_value(a).unwrap(), Some(a.seed)),
        Cmd::Train(a) => ("train", serde_json::to_value(a).unwrap(), Some(a.seed)),
        Cmd::Ring(a) => ("ring", serde_json::to_value(a).unwrap(), Some(a.seed)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outdir = manifest::resolve_outdir(cli.outdir.clone());
    let start = manifest::now_ms();
    let (name, params, seed) = describe(&cli.cmd);
    let result = match &cli.cmd {
        Cmd::Verify(a) => verify::run(a, &outdir),
        Cmd::Bench(a) => bench::run(a, &outdir),
        Cmd::Gen(a) => gen::run(a, &outdir),
        Cmd::Construct(a) => construct::run(a, &outdir),
        Cmd::Train(a) => traincmd::run(a, &outdir),
        Cmd::Ring(a) => ringcmd::run(a, &outdir),
    };
    let (passed, summary, code) = match &result {
        Ok(outcome) => (
            outcome.passed,
            outcome.summary.clone(),
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            },
        ),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                PathError::InvalidParameter(_) | PathError::MalformedSequence(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            };
            (false, format!("error: {e}"), code)
        }
    };
    let m = manifest::RunManifest {
        format_version: manifest::MANIFEST_FORMAT_VERSION,
        subcommand: name.to_string(),
        params,
        seed,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        start_unix_ms: start,
        end_unix_ms: manifest::now_ms(),
        passed,
        summary,
    };
    if let Err(e) = manifest::write(&outdir, &m) {
        eprintln!("error: failed to write manifest: {e}");
        return ExitCode::from(1);
    }
    code
}
