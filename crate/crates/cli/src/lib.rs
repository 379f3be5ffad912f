//! `genq` — experiment harness composing the quantization pipeline:
//! baseline training, candidate synthesis, in-distribution filtering, PTQ
//! with learned rounding, QAT finetuning, and the ablation/transfer
//! studies. Every command is reproducible: identical config and seed
//! produce identical report rows (wall-clock column aside).

pub mod commands;
pub mod config;
pub mod pool;
pub mod report;

use std::time::Instant;

use commands::{CliError, CmdResult};
use config::ExperimentConfig;

pub const USAGE: &str = "\
genq - quantization experiments in low-data regimes

USAGE:
  genq <COMMAND> --config <PATH> [--seed N] [--out DIR]

COMMANDS:
  train     Train and save the float baseline
  synth     Build and save a candidate image pool
  filter    Run the two-stage filtering pipeline on a fresh pool
  ptq       Calibrate + reconstruct rounding, report accuracy
  qat       PTQ followed by QAT finetuning
  ablate    Sweep filtering ratios at a fixed kept count
  transfer  Cross-model filtering/quantization grid

OPTIONS:
  --config PATH   Experiment config (JSON, required)
  --seed N        Replace the config's seed list with a single seed
  --out DIR       Override paths.out_dir

Reports append to <out_dir>/report.csv. Exit codes: 0 success, 2 config
error, 3 runtime error.
Environment: GENQ_ENDPOINT overrides gen.endpoint, GENQ_THREADS caps
worker threads.";

struct Invocation {
    command: String,
    config_path: String,
    seed: Option<u64>,
    out: Option<String>,
}

fn parse_args(args: &[String]) -> Result<Invocation, String> {
    let mut it = args.iter();
    let command = it.next().ok_or("missing command")?.clone();
    let known = [
        "train", "synth", "filter", "ptq", "qat", "ablate", "transfer",
    ];
    if !known.contains(&command.as_str()) {
        return Err(format!("unknown command {command:?}"));
    }
    let mut config_path = None;
    let mut seed = None;
    let mut out = None;
    while let Some(flag) = it.next() {
        match flag.as_str() {
            "--config" => {
                config_path = Some(it.next().ok_or("--config needs a path")?.clone());
            }
            "--seed" => {
                let v = it.next().ok_or("--seed needs a value")?;
                seed = Some(
                    v.parse::<u64>()
                        .map_err(|e| format!("bad --seed {v:?}: {e}"))?,
                );
            }
            "--out" => {
                out = Some(it.next().ok_or("--out needs a directory")?.clone());
            }
            other => return Err(format!("unknown option {other:?}")),
        }
    }
    Ok(Invocation {
        command,
        config_path: config_path.ok_or("--config is required")?,
        seed,
        out,
    })
}

fn dispatch(command: &str, cfg: &ExperimentConfig) -> CmdResult {
    match command {
        "train" => commands::cmd_train(cfg),
        "synth" => commands::cmd_synth(cfg),
        "filter" => commands::cmd_filter(cfg),
        "ptq" => commands::cmd_ptq(cfg),
        "qat" => commands::cmd_qat(cfg),
        "ablate" => commands::cmd_ablate(cfg),
        "transfer" => commands::cmd_transfer(cfg),
        _ => unreachable!("validated by parse_args"),
    }
}

/// Run the CLI. Returns the process exit code: 0 success, 2 config error,
/// 3 runtime error.
pub fn run(args: &[String]) -> i32 {
    let invocation = match parse_args(args) {
        Ok(inv) => inv,
        Err(msg) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            return 2;
        }
    };
    let mut cfg = match ExperimentConfig::load(&invocation.config_path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(seed) = invocation.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = invocation.out {
        cfg.paths.out_dir = out;
    }
    if let Err(e) = std::fs::create_dir_all(&cfg.paths.out_dir) {
        eprintln!("error: cannot create {}: {e}", cfg.paths.out_dir);
        return 3;
    }
    let started = Instant::now();
    let rows = match dispatch(&invocation.command, &cfg) {
        Ok(rows) => rows,
        Err(CliError::Config(msg)) => {
            eprintln!("error: config error: {msg}");
            return 2;
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            return 3;
        }
    };
    let report_path = format!("{}/report.csv", cfg.paths.out_dir);
    if let Err(e) = report::append_rows(&report_path, &rows) {
        eprintln!("error: writing {report_path}: {e}");
        return 3;
    }
    for r in &rows {
        println!("{}", r.to_csv());
    }
    let elapsed = started.elapsed().as_secs_f64();
    if elapsed > cfg.budget_seconds {
        eprintln!(
            "error: wall-clock budget exceeded: {elapsed:.1}s > {:.1}s",
            cfg.budget_seconds
        );
        return 3;
    }
    0
}
