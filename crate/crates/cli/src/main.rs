use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use posmlp_core::accounting::{summarize, MacConvention};
use posmlp_core::bench::{bench_operator, pin_to_one_core, to_csv, BenchKind, DEFAULT_MEMORY_CAP, MIN_REPS};
use posmlp_core::harness::{
    evaluate, export_relations, history_csv, run_selftest, train, Split, SyntheticTask, TaskKind, TrainConfig,
};
use posmlp_core::network::{Model, ModelConfig};
use posmlp_core::rpe::Window;

#[derive(Parser)]
#[command(name = "posmlp", version, about = "Positional gated MLP video backbone toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP report for a model config file or preset name (s, b, l).
    Summary {
        #[arg(long)]
        config: String,
        #[arg(long, default_value = "mac", value_parser = parse_convention)]
        convention: MacConvention,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Train on a synthetic task; writes model.ckpt, history.csv and config.json.
    Train {
        /// Training config JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on the held-out split of a task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Write every relation matrix of a checkpoint as CSV and PGM.
    ExportRelations {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time gating operators over a sweep of windows; CSV on stdout.
    Bench {
        /// Comma-separated: potgu, posgu, postgu, postgu-lazy, sgu, tgu.
        #[arg(long, value_delimiter = ',', default_value = "potgu,posgu,postgu,postgu-lazy,sgu")]
        kinds: Vec<String>,
        /// Comma-separated windows as TxHxW.
        #[arg(long, value_delimiter = ',', default_value = "16x7x7")]
        sweep: Vec<String>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        groups: usize,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        #[arg(long, default_value_t = DEFAULT_MEMORY_CAP)]
        memory_cap: usize,
    },
    /// Run the fast oracle and invariant checks.
    Selftest,
}

fn parse_convention(s: &str) -> Result<MacConvention, String> {
    MacConvention::parse(s).ok_or_else(|| format!("unknown convention `{s}` (mac or 2mac)"))
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::parse(s).ok_or_else(|| format!("unknown task `{s}` (direction, position or shuffle-control)"))
}

fn parse_window(s: &str) -> Result<Window> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("window `{s}` is not TxHxW"))?;
    match parts[..] {
        [t, h, w] if t > 0 && h > 0 && w > 0 => Ok(Window::new(t, h, w)),
        _ => bail!("window `{s}` is not TxHxW with positive extents"),
    }
}

fn load_model_config(spec: &str) -> Result<ModelConfig> {
    let path = Path::new(spec);
    if path.exists() {
        return ModelConfig::from_file(path).with_context(|| format!("reading {}", path.display()));
    }
    ModelConfig::by_name(spec).with_context(|| format!("`{spec}` is neither a file nor a preset"))
}

/// The synthetic task whose clips match the model's input shape.
fn task_for(config: &ModelConfig, kind: TaskKind, samples_per_class: usize, seed: u64) -> SyntheticTask {
    let i = config.input;
    SyntheticTask { kind, frames: i.frames, height: i.height, width: i.width, samples_per_class, seed }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Summary { config, convention, json } => {
            let summary = summarize(&load_model_config(&config)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                print!("{}", summary.render(convention));
            }
        }
        Command::Train { config, task, seed, out } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg: TrainConfig = serde_json::from_str(&text).context("parsing training config")?;
            cfg.seed = seed;
            let data = task_for(&cfg.model, task, cfg.train_per_class, seed);
            let outcome = train(&cfg, &data)?;
            fs::create_dir_all(&out)?;
            outcome.model.save(&out.join("model.ckpt"))?;
            fs::write(out.join("history.csv"), history_csv(&outcome.history))?;
            fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            println!("final val top1 {:.4}", outcome.final_val_top1());
        }
        Command::Eval { checkpoint, task, seed, samples_per_class, batch_size } => {
            let mut model = Model::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let data = task_for(&model.config, task, samples_per_class, seed).split(Split::Val, samples_per_class);
            let (loss, top1) = evaluate(&mut model, &data, batch_size)?;
            println!("loss {loss:.6} top1 {top1:.4}");
        }
        Command::ExportRelations { checkpoint, out } => {
            let model = Model::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let manifest = export_relations(&model, &out)?;
            println!("wrote {} matrices to {}", manifest.matrices.len(), out.display());
        }
        Command::Bench { kinds, sweep, channels, groups, reps, memory_cap } => {
            if reps < MIN_REPS {
                bail!("at least {MIN_REPS} reps are required");
            }
            let kinds: Vec<BenchKind> = kinds
                .iter()
                .map(|k| BenchKind::parse(k).with_context(|| format!("unknown operator `{k}`")))
                .collect::<Result<_>>()?;
            let windows: Vec<Window> = sweep.iter().map(|s| parse_window(s)).collect::<Result<_>>()?;
            if !pin_to_one_core() {
                eprintln!("warning: could not pin to one core");
            }
            let mut results = Vec::new();
            for &w in &windows {
                for &k in &kinds {
                    results.push(bench_operator(k, w, channels, groups, reps, memory_cap)?);
                }
            }
            print!("{}", to_csv(&results));
        }
        Command::Selftest => {
            let results = run_selftest();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
