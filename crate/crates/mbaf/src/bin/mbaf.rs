//! Command-line front end: train a checkpoint, estimate block-error rates
//! from one, and emit the analytic reference curves.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use mbaf::checkpoint;
use mbaf::config::{ExperimentConfig, Precision};
use mbaf::error::{Error, Result};
use mbaf::evaluation::{
    bounds_companion_path, calibrate_power, compute_bounds, emit_results, estimate_bler,
    write_bounds_csv, BlerEstimate,
};
use mbaf::model::MbafModel;
use mbaf::rng::derive_subseed;
use mbaf::scalar::Scalar;
use mbaf::training::{train, AdamW, TrainRecord};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mbaf", version, about = "Learned feedback codes for the two-user Gaussian MAC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, then write a checkpoint and a training log.
    Train {
        /// Preset name (paper, desk) or path to a TOML config file.
        #[arg(long, default_value = "desk")]
        config: String,
        /// Checkpoint output path; the log lands at the .train.csv sibling.
        #[arg(long)]
        out: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate block-error rates from a trained checkpoint.
    Eval {
        /// Trained checkpoint path.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Preset name or TOML file supplying the evaluation settings;
        /// the checkpoint decides everything about the model itself.
        #[arg(long)]
        config: Option<String>,
        /// Results CSV path; reference curves land at the .bounds.csv sibling.
        #[arg(long)]
        out: PathBuf,
        /// Evaluation seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Emit the analytic reference curves without a model.
    Bounds {
        /// Preset name (paper, desk) or path to a TOML config file.
        #[arg(long, default_value = "paper")]
        config: String,
        /// Reference-curve CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Master seed override (the curves themselves are deterministic).
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_ok =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if usage_ok { 0 } else { 1 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out, seed } => {
            let cfg = resolve_config(&config, seed)?;
            announce(&cfg);
            match cfg.model.precision {
                Precision::F32 => cmd_train::<f32>(cfg, &out),
                Precision::F64 => cmd_train::<f64>(cfg, &out),
            }
        }
        Command::Eval {
            checkpoint,
            config,
            out,
            seed,
        } => {
            let cfg = eval_config(&checkpoint, config.as_deref(), seed)?;
            announce(&cfg);
            match cfg.model.precision {
                Precision::F32 => cmd_eval::<f32>(&checkpoint, cfg, &out),
                Precision::F64 => cmd_eval::<f64>(&checkpoint, cfg, &out),
            }
        }
        Command::Bounds { config, out, seed } => {
            let cfg = resolve_config(&config, seed)?;
            announce(&cfg);
            cmd_bounds(&cfg, &out)
        }
    }
}

/// Accepts a preset name or a TOML file path.
fn resolve_config(spec: &str, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match spec {
        "paper" | "desk" => ExperimentConfig::preset(spec)?,
        path => ExperimentConfig::load(Path::new(path))?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// The checkpoint's config governs the model; the requested config, if any,
/// supplies the evaluation and bounds settings. Disagreement on anything
/// structural earns a warning and is ignored.
fn eval_config(
    checkpoint: &Path,
    spec: Option<&str>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut cfg = checkpoint::peek_config(checkpoint)?;
    if let Some(spec) = spec {
        let want = resolve_config(spec, None)?;
        if want.code != cfg.code
            || want.model != cfg.model
            || want.mode != cfg.mode
            || want.channel != cfg.channel
        {
            eprintln!(
                "warning: config {spec:?} disagrees with the checkpoint on the \
                 code, model, mode, or channel; proceeding with the checkpoint's"
            );
        }
        cfg.eval = want.eval;
        cfg.bounds = want.bounds;
    }
    if let Some(s) = seed {
        cfg.eval.seed = Some(s);
    }
    Ok(cfg)
}

/// Full resolved configuration, defaults included, logged up front.
fn announce(cfg: &ExperimentConfig) {
    eprintln!("resolved configuration:");
    for line in cfg.to_toml().lines() {
        eprintln!("  {line}");
    }
}

fn train_log_path(out: &Path) -> PathBuf {
    out.with_extension("train.csv")
}

fn cmd_train<T: Scalar>(cfg: ExperimentConfig, out: &Path) -> Result<()> {
    let log_path = train_log_path(out);
    let mut model: MbafModel<T> = MbafModel::init(cfg.clone())?;
    let mut opt = AdamW::new(&model, cfg.train.lr, cfg.train.weight_decay);
    let mut log = BufWriter::new(std::fs::File::create(&log_path)?);
    let mut observe = |rec: &TrainRecord| {
        eprintln!(
            "batch {:>6}  snr {:>5.2} dB  loss {:.6}  grad norm {:.4}  [{:.1}s]",
            rec.batch_idx, rec.snr_db, rec.loss, rec.grad_norm, rec.wall_time
        );
    };
    let outcome = train(&mut model, &mut opt, &mut log, &mut observe)?;
    log.flush()?;

    if cfg.train.recalibrate_episodes > 0 {
        let seed = derive_subseed(cfg.train_seed(), "recalibrate", 0);
        calibrate_power(
            &mut model,
            cfg.train.recalibrate_episodes,
            cfg.code.t,
            cfg.snr_target_db(),
            seed,
        )?;
    }
    checkpoint::save(out, &model, Some(&opt))?;

    match outcome.stopped_at_bler {
        Some(bler) => println!(
            "trained {} batches (early stop at validation BLER {bler:.4}), final loss {:.6}",
            outcome.batches_run, outcome.final_loss
        ),
        None => println!(
            "trained {} batches, final loss {:.6}",
            outcome.batches_run, outcome.final_loss
        ),
    }
    println!("checkpoint: {}", out.display());
    println!("training log: {}", log_path.display());
    Ok(())
}

fn cmd_eval<T: Scalar>(ckpt: &Path, cfg: ExperimentConfig, out: &Path) -> Result<()> {
    let (mut model, _) = checkpoint::load::<T>(ckpt)?;
    model.config.eval = cfg.eval.clone();
    let mut estimates: Vec<BlerEstimate> = Vec::new();
    for snr_db in cfg.eval_snrs() {
        let est = estimate_bler(
            &model,
            snr_db,
            cfg.eval.trials as u64,
            cfg.eval_seed(),
            cfg.eval.stop_at_errors,
        )?;
        println!(
            "snr {:>5.2} dB  rate {:.4}  bler {:.3e}  ci [{:.3e}, {:.3e}]  trials {}",
            est.snr_db, est.rate, est.bler, est.ci_low, est.ci_high, est.trials
        );
        estimates.push(est);
    }
    let bounds = compute_bounds(&cfg)?;
    emit_results(&estimates, &bounds, out)?;
    println!("estimates: {}", out.display());
    println!("reference curves: {}", bounds_companion_path(out).display());
    Ok(())
}

fn cmd_bounds(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let rows = compute_bounds(cfg)?;
    write_bounds_csv(out, &rows)?;
    println!("wrote {} reference rows: {}", rows.len(), out.display());
    Ok(())
}
