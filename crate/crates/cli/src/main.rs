use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sscsr::config::RunConfig;
use sscsr::imaging::{degrade_dir, load_png, save_png};
use sscsr::metrics::{evaluate_dir, EvalOptions, Upscaler};
use sscsr::selfcheck;
use sscsr::train::checkpoint::load_checkpoint;
use sscsr::train::runner::{run_training_with, Objective};

#[derive(Parser)]
#[command(name = "sscsr", version, about = "Consistency-regularized super-resolution training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    Online,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset root (HR/ and LRx<s>/) from a directory of HR PNGs.
    Degrade {
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        scale: usize,
    },
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every N steps (0 = only the summary).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Score SR output against HR images (PSNR/SSIM on luma).
    Eval {
        /// Checkpoint path, or `none` for the bicubic baseline.
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        lr_dir: PathBuf,
        #[arg(long)]
        hr_dir: PathBuf,
        /// Border crop in pixels; defaults to the scale factor.
        #[arg(long)]
        shave: Option<usize>,
        /// Upscaling factor for the bicubic baseline; checkpoints carry their own.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long, value_enum, default_value = "online")]
        weights: Weights,
        /// Round the SR output to 8 bits before scoring.
        #[arg(long)]
        quantize: bool,
        #[arg(long, default_value = "eval_report.csv")]
        report: PathBuf,
    },
    /// Upscale a single PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "online")]
        weights: Weights,
    },
    /// Run the built-in gradient, group, EMA, equivariance and optimizer checks.
    Selfcheck,
}

fn network(ckpt: &Path, weights: Weights) -> Result<Upscaler> {
    let state = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    Ok(Upscaler::Network(match weights {
        Weights::Online => state.online,
        Weights::Target => state.target,
    }))
}

fn cmd_degrade(hr_dir: &Path, out_dir: &Path, scale: usize) -> Result<()> {
    if scale == 0 {
        bail!("scale must be positive");
    }
    let n = degrade_dir(hr_dir, out_dir, scale)?;
    println!("degraded {n} images into {}", out_dir.display());
    Ok(())
}

fn cmd_train(config: &Path, resume: Option<&Path>, log_every: u64) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let start = Instant::now();
    let summary = run_training_with(&cfg, resume, Objective::Ssc, |m| {
        if log_every > 0 && m.step % log_every == 0 {
            eprintln!(
                "step {:>6}  loss {:.6}  rec {:.6}  cons {:.6}",
                m.step, m.loss_total, m.loss_rec, m.loss_cons
            );
        }
    })?;
    println!(
        "trained {} steps (now at step {}) in {:.1?}; metrics {}; checkpoint {}",
        summary.steps_run,
        summary.state.step,
        start.elapsed(),
        summary.metrics_csv.display(),
        summary.final_checkpoint.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &str,
    lr_dir: &Path,
    hr_dir: &Path,
    shave: Option<usize>,
    scale: Option<usize>,
    weights: Weights,
    quantize: bool,
    report: &Path,
) -> Result<()> {
    let upscaler = if ckpt == "none" {
        Upscaler::Bicubic {
            scale: scale.unwrap_or(2),
        }
    } else {
        let net = network(Path::new(ckpt), weights)?;
        if let Some(s) = scale.filter(|&s| s != net.scale()) {
            bail!("--scale {s} disagrees with the checkpoint's scale {}", net.scale());
        }
        net
    };
    let opts = EvalOptions {
        shave: shave.unwrap_or(upscaler.scale()),
        quantize,
    };
    let r = evaluate_dir(&upscaler, lr_dir, hr_dir, opts)?;
    r.write_csv(report)?;
    println!(
        "{} images, shave {}: mean PSNR {:.4} dB, mean SSIM {:.4}; report {}",
        r.scores.len(),
        r.shave,
        r.mean_psnr_db,
        r.mean_ssim,
        report.display()
    );
    Ok(())
}

fn cmd_infer(ckpt: &Path, input: &Path, output: &Path, weights: Weights) -> Result<()> {
    let net = network(ckpt, weights)?;
    let img = load_png(input)?.to_float();
    let sr = net.upscale(&img)?.to_u8();
    save_png(&sr, output)?;
    println!(
        "{}x{} -> {}x{}: {}",
        img.width(),
        img.height(),
        sr.width(),
        sr.height(),
        output.display()
    );
    Ok(())
}

fn cmd_selfcheck() -> bool {
    let start = Instant::now();
    let results = selfcheck::run_all();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("selfcheck: {passed}/{} passed in {:.1?}", results.len(), start.elapsed());
    passed == results.len()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Degrade { hr_dir, out_dir, scale } => cmd_degrade(&hr_dir, &out_dir, scale),
        Command::Train {
            config,
            resume,
            log_every,
        } => cmd_train(&config, resume.as_deref(), log_every),
        Command::Eval {
            ckpt,
            lr_dir,
            hr_dir,
            shave,
            scale,
            weights,
            quantize,
            report,
        } => cmd_eval(&ckpt, &lr_dir, &hr_dir, shave, scale, weights, quantize, &report),
        Command::Infer {
            ckpt,
            input,
            output,
            weights,
        } => cmd_infer(&ckpt, &input, &output, weights),
        Command::Selfcheck => {
            return if cmd_selfcheck() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
