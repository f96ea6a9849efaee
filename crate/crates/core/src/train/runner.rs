//! Training runs on disk: dataset loading, batch assembly, the metrics CSV,
//! periodic checkpoints and resumption.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::{init_state, ssc_step, streams, substream, supervised_step, Batch, StepMetrics, TrainConfig, TrainState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imaging::{sample_patch_pair, DatasetIndex, ImageF};
use crate::metrics::{evaluate_pairs, EvalOptions, Upscaler};
use crate::tensor::Tensor;

/// In-memory (name, LR, HR) training pairs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pairs: Vec<(String, ImageF, ImageF)>,
    scale: usize,
}

impl Dataset {
    pub fn load(root: &Path, scale: usize) -> Result<Self> {
        Self::from_pairs(DatasetIndex::scan(root, scale)?.load()?, scale)
    }

    pub fn from_pairs(pairs: Vec<(String, ImageF, ImageF)>, scale: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        for (name, lr, hr) in &pairs {
            if hr.width() != scale * lr.width() || hr.height() != scale * lr.height() {
                return Err(Error::Dataset(format!("{name}: HR is not {scale}x LR")));
            }
        }
        Ok(Dataset { pairs, scale })
    }

    pub fn pairs(&self) -> &[(String, ImageF, ImageF)] {
        &self.pairs
    }

    /// Batch for the step that follows `completed` steps. Images are visited
    /// in per-epoch shuffled order (without replacement); patch corners come
    /// from a per-step stream. Both depend only on the seed and the step
    /// index, so resumed runs see the same data.
    pub fn batch(&self, cfg: &TrainConfig, completed: u64) -> Result<Batch> {
        if cfg.model.scale != self.scale {
            return Err(Error::Dataset(format!(
                "dataset scale {} but model scale {}",
                self.scale, cfg.model.scale
            )));
        }
        let mut rng = substream(cfg.seed, streams::PATCH_BASE + completed);
        let (p, s, n) = (cfg.lr_patch_size, self.scale, cfg.batch_size);
        let count = self.pairs.len() as u64;
        let mut order: Option<(u64, Vec<usize>)> = None;
        let mut lr = Vec::with_capacity(n * 3 * p * p);
        let mut hr = Vec::with_capacity(n * 3 * s * s * p * p);
        for k in completed * n as u64..(completed + 1) * n as u64 {
            let epoch = k / count;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..self.pairs.len()).collect();
                perm.shuffle(&mut substream(cfg.seed, streams::EPOCH_BASE + epoch));
                order = Some((epoch, perm));
            }
            let image = order.as_ref().expect("set above").1[(k % count) as usize];
            let (_, l, h) = &self.pairs[image];
            let (lp, hp) = sample_patch_pair(&mut rng, l, h, p, s)?;
            lr.extend_from_slice(lp.data());
            hr.extend_from_slice(hp.data());
        }
        Batch::new(
            Tensor::new(vec![n, 3, p, p], lr)?,
            Tensor::new(vec![n, 3, s * p, s * p], hr)?,
            s,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Reconstruction plus weighted consistency against the EMA target.
    Ssc,
    /// Reconstruction only; target and projection head are never touched.
    Supervised,
}

pub fn train_step(state: &mut TrainState, batch: &Batch, objective: Objective) -> Result<StepMetrics> {
    match objective {
        Objective::Ssc => ssc_step(state, batch),
        Objective::Supervised => supervised_step(state, batch),
    }
}

/// Runs steps until `state.step == until`, calling `on_step` after each.
pub fn train_until(
    state: &mut TrainState,
    data: &Dataset,
    objective: Objective,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
) -> Result<()> {
    while state.step < until {
        let batch = data.batch(&state.config, state.step)?;
        let m = train_step(state, &batch, objective)?;
        on_step(state, &m)?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct RunSummary {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub steps_run: u64,
    pub last: Option<StepMetrics>,
}

pub fn checkpoint_path(output_dir: &Path, step: u64) -> PathBuf {
    output_dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

pub fn final_checkpoint_path(output_dir: &Path) -> PathBuf {
    output_dir.join("final.ckpt")
}

fn io_err(what: &str, path: &Path) -> impl FnOnce(std::io::Error) -> Error {
    let context = format!("{what} {}", path.display());
    move |e| Error::io(context, e)
}

/// Keeps the header and rows up to `step`; rows after it belong to the part of
/// an earlier run that the checkpoint does not cover.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(io_err("reading", path))?;
    let mut kept = String::from(StepMetrics::CSV_HEADER);
    kept.push('\n');
    for line in text.lines().skip(1) {
        let row_step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Dataset(format!("malformed metrics row {line:?} in {}", path.display())))?;
        if row_step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(io_err("writing", path))
}

fn open_metrics(path: &Path, resumed_at: Option<u64>) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err("creating", dir))?;
    }
    match resumed_at {
        Some(step) if path.exists() => truncate_metrics(path, step)?,
        _ => fs::write(path, format!("{}\n", StepMetrics::CSV_HEADER)).map_err(io_err("writing", path))?,
    }
    OpenOptions::new().append(true).open(path).map_err(io_err("opening", path))
}

fn append_line(file: &mut File, line: &str, path: &Path) -> Result<()> {
    // one write per row, so a row is either fully present or absent
    file.write_all(format!("{line}\n").as_bytes())
        .and_then(|_| file.flush())
        .map_err(io_err("appending to", path))
}

/// Evaluates online and target weights on the full training images.
fn evaluate_training_set(state: &TrainState, data: &Dataset) -> Result<[(String, f64, f64); 2]> {
    let opts = EvalOptions {
        shave: state.config.model.scale,
        quantize: false,
    };
    let online = evaluate_pairs(&Upscaler::Network(state.online.clone()), data.pairs(), opts)?;
    let target = evaluate_pairs(&Upscaler::Network(state.target.clone()), data.pairs(), opts)?;
    Ok([
        ("online".into(), online.mean_psnr_db, online.mean_ssim),
        ("target".into(), target.mean_psnr_db, target.mean_ssim),
    ])
}

/// Full training run as configured. The dataset is loaded before anything is
/// written, so a missing dataset leaves no output behind.
pub fn run_training(cfg: &RunConfig, resume: Option<&Path>, objective: Objective) -> Result<RunSummary> {
    run_training_with(cfg, resume, objective, |_| {})
}

/// [`run_training`] with a callback after every step.
pub fn run_training_with(
    cfg: &RunConfig,
    resume: Option<&Path>,
    objective: Objective,
    mut progress: impl FnMut(&StepMetrics),
) -> Result<RunSummary> {
    cfg.train.validate()?;
    let data = Dataset::load(&cfg.data_root, cfg.train.model.scale)?;
    let mut state = match resume {
        Some(path) => {
            let mut s = load_checkpoint(path)?;
            let mut expected = cfg.train.clone();
            expected.total_steps = s.config.total_steps;
            if s.config != expected {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different training config",
                    path.display()
                )));
            }
            s.config.total_steps = cfg.train.total_steps;
            s
        }
        None => init_state(&cfg.train)?,
    };

    let out = &cfg.output_dir;
    fs::create_dir_all(out.join("checkpoints")).map_err(io_err("creating", out))?;
    let echo = out.join("config.resolved");
    fs::write(&echo, cfg.to_text()).map_err(io_err("writing", &echo))?;
    let metrics_csv = cfg.metrics_path();
    let mut log = open_metrics(&metrics_csv, resume.map(|_| state.step))?;
    let eval_csv = out.join("eval.csv");
    let mut eval_log = if cfg.eval_every > 0 {
        if resume.is_none() || !eval_csv.exists() {
            fs::write(&eval_csv, "step,weights,psnr_db,ssim\n").map_err(io_err("writing", &eval_csv))?;
        }
        Some(OpenOptions::new().append(true).open(&eval_csv).map_err(io_err("opening", &eval_csv))?)
    } else {
        None
    };

    let start = state.step;
    let mut last = None;
    train_until(&mut state, &data, objective, cfg.train.total_steps, |s, m| {
        append_line(&mut log, &m.csv_row(), &metrics_csv)?;
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            save_checkpoint(s, &checkpoint_path(out, m.step))?;
        }
        if let Some(f) = eval_log.as_mut().filter(|_| m.step % cfg.eval_every == 0) {
            for (w, psnr, ssim) in evaluate_training_set(s, &data)? {
                append_line(f, &format!("{},{w},{psnr:.6},{ssim:.6}", m.step), &eval_csv)?;
            }
        }
        last = Some(*m);
        progress(m);
        Ok(())
    })?;
    let final_checkpoint = final_checkpoint_path(out);
    save_checkpoint(&state, &final_checkpoint)?;
    Ok(RunSummary {
        steps_run: state.step - start,
        state,
        final_checkpoint,
        metrics_csv,
        last,
    })
}
