use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use iat_core::check::{self, Suite};
use iat_core::config::RunConfig;
use iat_core::data::{generate_scenes, read_dataset, write_dataset, SceneConfig};
use iat_core::infer::{detect, evaluate_model, read_image, write_instances};
use iat_core::model::Model;
use iat_core::params::ParamStore;
use iat_core::train::{run_training, Checkpoint, Trainer};
use iat_core::{Error, Exec};

const CHECKPOINT_FILE: &str = "checkpoint.iatc";
const LOG_FILE: &str = "train.log.jsonl";
const RESOLVED_FILE: &str = "config.resolved";

#[derive(Parser)]
#[command(
    name = "iat",
    version,
    about = "Toy instance segmentation with instance-aware deformable attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Image extent in pixels (multiple of 64).
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train on a dataset, logging JSON lines and checkpointing into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (its stored config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config key, e.g. `--set steps=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset; prints the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Override an inference key (score_threshold, top_k, parallel).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write per-instance PGM masks and a sidecar for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tensor file (.iatw) or binary PPM.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override an inference key (score_threshold, top_k, parallel).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run invariant suites.
    Check {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => ExitCode::from(3),
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate {
            out,
            scenes,
            seed,
            size,
        } => generate(&out, scenes, seed, size),
        Command::Train {
            config,
            data,
            out,
            resume,
            overrides,
        } => train(config.as_deref(), &data, &out, resume.as_deref(), &overrides),
        Command::Eval {
            checkpoint,
            data,
            overrides,
        } => eval(&checkpoint, &data, &overrides),
        Command::Infer {
            checkpoint,
            image,
            out,
            overrides,
        } => infer(&checkpoint, &image, &out, &overrides),
        Command::Check { suite } => run_checks(&suite),
    }
}

fn generate(out: &Path, scenes: usize, seed: u64, size: usize) -> Result<(), Failure> {
    let cfg = SceneConfig::with_size(size).map_err(|e| Failure::Usage(e.to_string()))?;
    let generated = generate_scenes(seed, scenes, &cfg, Exec::default())?;
    let manifest = write_dataset(out, seed, &generated)?;
    eprintln!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(())
}

fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    overrides: &[String],
) -> Result<(), Failure> {
    let dataset = read_dataset(data)?;
    let mut trainer = match resume {
        Some(path) => {
            if config.is_some() {
                return Err(Failure::Usage("--config cannot be combined with --resume".into()));
            }
            let mut trainer = Trainer::resume(&Checkpoint::load(path)?, &dataset.scenes)?;
            // only the run length may change when resuming
            for kv in overrides {
                let (key, value) = split_override(kv)?;
                if key != "steps" && key != "checkpoint_every" {
                    return Err(Failure::Usage(format!("cannot override {key} when resuming")));
                }
                trainer.cfg.set(key, value).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            trainer
        }
        None => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
                None => RunConfig::default(),
            };
            for kv in overrides {
                let (key, value) = split_override(kv)?;
                cfg.set(key, value).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            Trainer::new(cfg, &dataset.scenes)?
        }
    };
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_FILE), trainer.cfg.to_text())?;
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join(LOG_FILE))?;
    let mut log = BufWriter::new(log_file);
    let started = Instant::now();
    let iou = run_training(&mut trainer, &mut log, &out.join(CHECKPOINT_FILE), |line| {
        if line.step == 1 || line.step % 10 == 0 {
            eprintln!(
                "step {:>5}  loss {:.4}  ({:.1}s)",
                line.step,
                line.total,
                started.elapsed().as_secs_f64()
            );
        }
    })?;
    log.flush()?;
    eprintln!(
        "train mask IoU {:.4} on the mask grid ({:.4} at image resolution) over {} matched targets",
        iou.grid, iou.full, iou.matched
    );
    Ok(())
}

fn split_override(kv: &str) -> Result<(&str, &str), Failure> {
    kv.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Failure::Usage(format!("expected KEY=VALUE, got {kv:?}")))
}

/// Restores a checkpoint and applies inference-only overrides.
fn restore(checkpoint: &Path, overrides: &[String]) -> Result<(RunConfig, Model, ParamStore), Failure> {
    let (mut cfg, model, store) = Checkpoint::load(checkpoint)?.restore()?;
    for kv in overrides {
        let (key, value) = split_override(kv)?;
        if !matches!(key, "score_threshold" | "top_k" | "parallel") {
            return Err(Failure::Usage(format!("{key} cannot be overridden at inference")));
        }
        cfg.set(key, value).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((cfg, model, store))
}

fn eval(checkpoint: &Path, data: &Path, overrides: &[String]) -> Result<(), Failure> {
    let (cfg, model, store) = restore(checkpoint, overrides)?;
    let dataset = read_dataset(data)?;
    let exec = if cfg.parallel {
        Exec::default()
    } else {
        Exec::Sequential
    };
    let report = evaluate_model(&model, &store, &dataset.scenes, cfg.score_threshold, cfg.top_k, exec)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(())
}

fn infer(checkpoint: &Path, image: &Path, out: &Path, overrides: &[String]) -> Result<(), Failure> {
    let (cfg, model, store) = restore(checkpoint, overrides)?;
    let image = read_image(image)?;
    let instances = detect(&model, &store, &image, cfg.score_threshold, cfg.top_k)?;
    write_instances(out, cfg.image_size, &instances)?;
    eprintln!("wrote {} instances to {}", instances.len(), out.display());
    Ok(())
}

fn run_checks(name: &str) -> Result<(), Failure> {
    let suites = if name == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![name.parse::<Suite>().map_err(|e| Failure::Usage(e.to_string()))?]
    };
    let mut failed = false;
    for suite in suites {
        let report = check::run(suite);
        let mut out = std::io::stdout().lock();
        for item in &report.items {
            let status = if item.passed { "ok  " } else { "FAIL" };
            writeln!(out, "[{status}] {}::{}  {}", suite.name(), item.name, item.detail)?;
        }
        failed |= !report.passed();
    }
    if failed {
        eprintln!("check failed");
        Err(Failure::Check)
    } else {
        Ok(())
    }
}
