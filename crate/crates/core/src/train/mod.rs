//! Training state and the per-step update.
//!
//! One step: draw two dihedral views per sample, run the online network on
//! the first view (recorded on a tape), score it against HR after undoing the
//! view, and, when `alpha > 0`, compare the projected online output with the
//! EMA target's output on the second view. The target runs eagerly, so it is
//! a constant as far as the tape is concerned.

pub mod checkpoint;
pub mod runner;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_batch, batch_index_map, DihedralOp};
use crate::config::Entry;
use crate::error::{Error, Result};
use crate::models::{Module, ParamSet, ProjectionHead, SrNetConfig, SrNetwork};
use crate::tensor::{Gradients, Graph, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsistencyMetric {
    L1,
    L2,
}

impl FromStr for ConsistencyMetric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "L1" | "l1" => Ok(ConsistencyMetric::L1),
            "L2" | "l2" => Ok(ConsistencyMetric::L2),
            _ => Err("expected L1 or L2".into()),
        }
    }
}

impl fmt::Display for ConsistencyMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConsistencyMetric::L1 => "L1",
            ConsistencyMetric::L2 => "L2",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub lr_patch_size: usize,
    /// Weight of the consistency loss; 0 disables the target branch.
    pub alpha: f64,
    pub ema_beta: f64,
    pub consistency_metric: ConsistencyMetric,
    pub total_steps: u64,
    pub seed: u64,
    pub model: SrNetConfig,
    pub proj_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 4,
            lr_patch_size: 16,
            alpha: 0.01,
            ema_beta: 0.999,
            consistency_metric: ConsistencyMetric::L1,
            total_steps: 2000,
            seed: 0,
            model: SrNetConfig::default(),
            proj_channels: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{k} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        if self.batch_size == 0 || self.lr_patch_size == 0 {
            return bad("batch_size and lr_patch_size must be positive".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return bad(format!("ema_beta must be in [0, 1], got {}", self.ema_beta));
        }
        if self.proj_channels == 0 {
            return bad("proj_channels must be positive".into());
        }
        self.model.validate()
    }

    /// Applies one config entry; `Ok(false)` if the key is not a training key.
    pub fn set(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "learning_rate" => self.learning_rate = e.parse()?,
            "adam_beta1" => self.adam_beta1 = e.parse()?,
            "adam_beta2" => self.adam_beta2 = e.parse()?,
            "adam_epsilon" => self.adam_epsilon = e.parse()?,
            "batch_size" => self.batch_size = e.parse()?,
            "lr_patch_size" => self.lr_patch_size = e.parse()?,
            "alpha" => self.alpha = e.parse()?,
            "ema_beta" => self.ema_beta = e.parse()?,
            "consistency_metric" => self.consistency_metric = e.parse()?,
            "total_steps" => self.total_steps = e.parse()?,
            "seed" => self.seed = e.parse()?,
            "scale" => self.model.scale = e.parse()?,
            "channels" => self.model.channels = e.parse()?,
            "num_blocks" => self.model.num_blocks = e.parse()?,
            "proj_channels" => self.proj_channels = e.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every training key with its value; floats print in shortest round-trip form.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_epsilon", self.adam_epsilon.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_patch_size", self.lr_patch_size.to_string()),
            ("alpha", self.alpha.to_string()),
            ("ema_beta", self.ema_beta.to_string()),
            ("consistency_metric", self.consistency_metric.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("scale", self.model.scale.to_string()),
            ("channels", self.model.channels.to_string()),
            ("num_blocks", self.model.num_blocks.to_string()),
            ("proj_channels", self.proj_channels.to_string()),
        ]
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Substream ids under the master seed.
pub mod streams {
    pub const ONLINE_INIT: u64 = 1;
    pub const PROJ_INIT: u64 = 2;
    pub const AUGMENT: u64 = 3;
    /// Patch sampling for step `t` uses stream `PATCH_BASE + t`.
    pub const PATCH_BASE: u64 = 1 << 32;
    /// Image order of epoch `e` uses stream `EPOCH_BASE + e`.
    pub const EPOCH_BASE: u64 = 1 << 48;
}

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

impl AdamMoments {
    pub fn zeros_like(params: &ParamSet<f32>) -> Self {
        AdamMoments {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.m.bit_eq(&other.m) && self.v.bit_eq(&other.v)
    }
}

/// One Adam update of a single scalar; returns `(p, m, v)`.
///
/// Arithmetic is in `f64`; the stored parameter and moments are `f32`.
pub fn adam_scalar(p: f32, g: f32, m: f32, v: f32, t: u64, h: &AdamHyper) -> (f32, f32, f32) {
    let g = g as f64;
    let m = h.beta1 * m as f64 + (1.0 - h.beta1) * g;
    let v = h.beta2 * v as f64 + (1.0 - h.beta2) * g * g;
    let m_hat = m / (1.0 - h.beta1.powf(t as f64));
    let v_hat = v / (1.0 - h.beta2.powf(t as f64));
    let p = p as f64 - h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
    (p as f32, m as f32, v as f32)
}

/// Adam over a parameter set; `t` counts from 1. Nothing is modified if any
/// gradient is non-finite or mis-shaped.
pub fn adam_step(
    params: &mut ParamSet<f32>,
    grads: &[Tensor<f32>],
    moments: &mut AdamMoments,
    t: u64,
    hyper: &AdamHyper,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("Adam step index starts at 1".into()));
    }
    if grads.len() != params.len()
        || !params.same_layout(&moments.m)
        || !params.same_layout(&moments.v)
        || params.tensors().zip(grads).any(|(p, g)| p.shape() != g.shape())
    {
        return Err(Error::shape("adam_step", "gradients or moments do not match parameters"));
    }
    if let Some((name, _)) = params.iter().zip(grads).find(|(_, g)| !g.is_finite()) {
        return Err(Error::NumericFault(format!("gradient of {}", name.0)));
    }
    let moment_m = moments.m.iter_mut().map(|(_, t)| t);
    let moment_v = moments.v.iter_mut().map(|(_, t)| t);
    for ((((_, p), g), m), v) in params.iter_mut().zip(grads).zip(moment_m).zip(moment_v) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            (p[i], m[i], v[i]) = adam_scalar(p[i], g.data()[i], m[i], v[i], t, hyper);
        }
    }
    Ok(())
}

/// `target <- beta * target + (1 - beta) * online`, elementwise.
///
/// `beta = 0` copies and `beta = 1` leaves the target untouched, bit for bit.
pub fn ema_update(target: &mut ParamSet<f32>, online: &ParamSet<f32>, beta: f64) -> Result<()> {
    if !target.same_layout(online) {
        return Err(Error::shape("ema_update", "target and online parameter namespaces differ"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("EMA decay must be in [0, 1], got {beta}")));
    }
    if beta == 1.0 {
        return Ok(());
    }
    for ((_, t), o) in target.iter_mut().zip(online.tensors()) {
        if beta == 0.0 {
            t.data_mut().copy_from_slice(o.data());
            continue;
        }
        for (t, &o) in t.data_mut().iter_mut().zip(o.data()) {
            *t = (beta * *t as f64 + (1.0 - beta) * o as f64) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub online: SrNetwork<f32>,
    pub target: SrNetwork<f32>,
    pub proj: ProjectionHead<f32>,
    pub online_moments: AdamMoments,
    pub proj_moments: AdamMoments,
    /// Completed steps.
    pub step: u64,
    /// Source of the per-step dihedral views.
    pub aug_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.online.params().bit_eq(other.online.params())
            && self.target.params().bit_eq(other.target.params())
            && self.proj.params().bit_eq(other.proj.params())
            && self.online_moments.bit_eq(&other.online_moments)
            && self.proj_moments.bit_eq(&other.proj_moments)
            && self.step == other.step
            && self.aug_rng == other.aug_rng
    }
}

/// Fresh state: online and projection weights from their seed substreams,
/// target an exact copy of online, zero moments, step 0.
pub fn init_state(config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let online = SrNetwork::build(config.model, &mut substream(config.seed, streams::ONLINE_INIT))?;
    let proj = ProjectionHead::build(config.proj_channels, &mut substream(config.seed, streams::PROJ_INIT))?;
    Ok(TrainState {
        config: config.clone(),
        target: online.clone(),
        online_moments: AdamMoments::zeros_like(online.params()),
        proj_moments: AdamMoments::zeros_like(proj.params()),
        online,
        proj,
        step: 0,
        aug_rng: substream(config.seed, streams::AUGMENT),
    })
}

/// Aligned LR/HR patch batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
}

impl Batch {
    /// Requires `lr: [N, 3, p, p]` and `hr: [N, 3, s*p, s*p]`.
    pub fn new(lr: Tensor<f32>, hr: Tensor<f32>, scale: usize) -> Result<Self> {
        let &[n, 3, h, w] = lr.shape() else {
            return Err(Error::shape("batch", format!("LR must be [N, 3, p, p], got {:?}", lr.shape())));
        };
        if h != w {
            return Err(Error::shape("batch", format!("patches must be square, got {h}x{w}")));
        }
        if hr.shape() != [n, 3, scale * h, scale * w] {
            return Err(Error::shape(
                "batch",
                format!("HR {:?} does not match LR {:?} at scale {scale}", hr.shape(), lr.shape()),
            ));
        }
        Ok(Batch { lr, hr })
    }

    pub fn len(&self) -> usize {
        self.lr.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-sample dihedral views: `online[i]` feeds the online network, `target[i]` the target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Views {
    pub online: Vec<DihedralOp>,
    pub target: Vec<DihedralOp>,
}

impl Views {
    /// Two draws per sample, online first, regardless of whether the target is used.
    pub fn draw(rng: &mut ChaCha8Rng, n: usize) -> Self {
        let mut online = Vec::with_capacity(n);
        let mut target = Vec::with_capacity(n);
        for _ in 0..n {
            online.push(DihedralOp::sample(rng));
            target.push(DihedralOp::sample(rng));
        }
        Views { online, target }
    }

    fn online_inverse(&self) -> Vec<DihedralOp> {
        self.online.iter().map(|g| g.inverse()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Step index after the update, starting at 1.
    pub step: u64,
    pub loss_total: f32,
    pub loss_rec: f32,
    pub loss_cons: f32,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss_total,loss_rec,loss_cons";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss_total, self.loss_rec, self.loss_cons)
    }
}

#[derive(Clone, Debug)]
pub struct Losses<V> {
    pub total: V,
    pub rec: V,
    /// `None` when the consistency branch is disabled.
    pub cons: Option<V>,
}

/// The training objective over arbitrary modules, so that it can be checked
/// with substitute networks and in `f64`.
pub struct Objective<'a, F: Scalar, On, Pr, Tg> {
    pub online: &'a On,
    pub proj: &'a Pr,
    pub target: &'a Tg,
    pub alpha: F,
    pub metric: ConsistencyMetric,
}

impl<F, On, Pr, Tg> Objective<'_, F, On, Pr, Tg>
where
    F: Scalar,
    On: Module<F>,
    Pr: Module<F>,
    Tg: Module<F>,
{
    pub fn consistency_enabled(&self) -> bool {
        self.alpha != F::zero()
    }

    /// `proj_params` may be empty when the consistency branch is disabled.
    pub fn losses<G: Graph<F>>(
        &self,
        g: &mut G,
        online_params: &[G::Value],
        proj_params: &[G::Value],
        lr: &Tensor<F>,
        hr: &Tensor<F>,
        views: &Views,
    ) -> Result<Losses<G::Value>> {
        let n = lr.shape().first().copied().unwrap_or(0);
        if views.online.len() != n || views.target.len() != n {
            return Err(Error::shape("objective", format!("{n} samples but {} views", views.online.len())));
        }
        let x = g.constant(apply_batch(&views.online, lr)?);
        let sr = self.online.forward(g, online_params, &x)?;
        let undo = views.online_inverse();
        let (index, shape) = batch_index_map(&undo, g.value(&sr).shape())?;
        let sr_aligned = g.gather(&sr, index, shape)?;
        let hr = g.constant(hr.clone());
        let rec = g.l1_loss(&sr_aligned, &hr)?;
        if !self.consistency_enabled() {
            return Ok(Losses {
                total: rec.clone(),
                rec,
                cons: None,
            });
        }

        let pseudo = self.target.infer(&apply_batch(&views.target, lr)?)?;
        let projected = self.proj.forward(g, proj_params, &sr)?;
        let chain: Vec<DihedralOp> = views
            .target
            .iter()
            .zip(&undo)
            .map(|(&t, &u)| DihedralOp::compose(t, u))
            .collect();
        let (index, shape) = batch_index_map(&chain, g.value(&projected).shape())?;
        let projected = g.gather(&projected, index, shape)?;
        let pseudo = g.constant(pseudo);
        let cons = match self.metric {
            ConsistencyMetric::L1 => g.l1_loss(&projected, &pseudo)?,
            ConsistencyMetric::L2 => g.l2_loss(&projected, &pseudo)?,
        };
        let weighted = g.scale(&cons, self.alpha);
        let total = g.add(&rec, &weighted)?;
        Ok(Losses {
            total,
            rec,
            cons: Some(cons),
        })
    }
}

/// What the tape saw during one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepTrace {
    /// Labels of every trainable tape input.
    pub tape_parameters: Vec<String>,
    /// Number of gradient tensors the backward sweep produced for trainable inputs.
    pub gradient_buffers: usize,
}

fn collect_grads(grads: &Gradients<f32>, vars: &[Var], params: &ParamSet<f32>) -> Vec<Tensor<f32>> {
    vars.iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

fn check_finite(label: &str, grads: &[Tensor<f32>]) -> Result<()> {
    if grads.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::NumericFault(format!("{label} gradients")))
    }
}

fn check_loss(label: &str, v: f32) -> Result<f32> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericFault(format!("{label} loss is {v}")))
    }
}

pub fn ssc_step(state: &mut TrainState, batch: &Batch) -> Result<StepMetrics> {
    ssc_step_traced(state, batch).map(|(m, _)| m)
}

/// [`ssc_step`] that also reports what was registered on the tape.
///
/// On error the state is left exactly as it was.
pub fn ssc_step_traced(state: &mut TrainState, batch: &Batch) -> Result<(StepMetrics, StepTrace)> {
    let batch = Batch::new(batch.lr.clone(), batch.hr.clone(), state.config.model.scale)?;
    let mut rng = state.aug_rng.clone();
    let views = Views::draw(&mut rng, batch.len());
    let objective = Objective {
        online: &state.online,
        proj: &state.proj,
        target: &state.target,
        alpha: state.config.alpha as f32,
        metric: state.config.consistency_metric,
    };
    let active = objective.consistency_enabled();

    let mut tape = Tape::new();
    let online_vars = state.online.lift(&mut tape, "online");
    let proj_vars = if active {
        state.proj.lift(&mut tape, "proj")
    } else {
        Vec::new()
    };
    let losses = objective.losses(&mut tape, &online_vars, &proj_vars, &batch.lr, &batch.hr, &views)?;
    let loss_total = check_loss("total", tape.value(losses.total).item()?)?;
    let loss_rec = check_loss("reconstruction", tape.value(losses.rec).item()?)?;
    let loss_cons = match losses.cons {
        Some(c) => check_loss("consistency", tape.value(c).item()?)?,
        None => 0.0,
    };

    let grads = tape.backward(losses.total)?;
    let online_grads = collect_grads(&grads, &online_vars, state.online.params());
    check_finite("online", &online_grads)?;
    let proj_grads = collect_grads(&grads, &proj_vars, state.proj.params());
    check_finite("projection", &proj_grads)?;
    let trace = StepTrace {
        tape_parameters: tape.parameter_labels().into_iter().map(String::from).collect(),
        gradient_buffers: grads.len(),
    };
    drop(tape);

    let t = state.step + 1;
    let hyper = state.config.adam();
    let online_prev = state.online.params().clone();
    adam_step(state.online.params_mut(), &online_grads, &mut state.online_moments, t, &hyper)?;
    if active {
        adam_step(state.proj.params_mut(), &proj_grads, &mut state.proj_moments, t, &hyper)?;
    }
    // the target tracks the online weights as they were before this update
    ema_update(state.target.params_mut(), &online_prev, state.config.ema_beta)?;
    state.step = t;
    state.aug_rng = rng;
    Ok((
        StepMetrics {
            step: t,
            loss_total,
            loss_rec,
            loss_cons,
        },
        trace,
    ))
}

/// Plain L1 training of the online network: same view draws, no target,
/// no projection head.
pub fn supervised_step(state: &mut TrainState, batch: &Batch) -> Result<StepMetrics> {
    let batch = Batch::new(batch.lr.clone(), batch.hr.clone(), state.config.model.scale)?;
    let mut rng = state.aug_rng.clone();
    let views = Views::draw(&mut rng, batch.len());

    let mut tape = Tape::new();
    let params = state.online.lift(&mut tape, "online");
    let x = tape.constant(apply_batch(&views.online, &batch.lr)?);
    let sr = state.online.forward(&mut tape, &params, &x)?;
    let (index, shape) = batch_index_map(&views.online_inverse(), tape.value(sr).shape())?;
    let sr = tape.gather(sr, index, shape)?;
    let hr = tape.constant(batch.hr.clone());
    let loss = tape.l1_loss(sr, hr)?;
    let value = check_loss("reconstruction", tape.value(loss).item()?)?;
    let grads = tape.backward(loss)?;
    let grads = collect_grads(&grads, &params, state.online.params());
    check_finite("online", &grads)?;

    let t = state.step + 1;
    adam_step(state.online.params_mut(), &grads, &mut state.online_moments, t, &state.config.adam())?;
    state.step = t;
    state.aug_rng = rng;
    Ok(StepMetrics {
        step: t,
        loss_total: value,
        loss_rec: value,
        loss_cons: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Identity, NearestUpsampler};
    use rand::Rng;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            lr_patch_size: 6,
            model: SrNetConfig {
                scale: 2,
                channels: 4,
                num_blocks: 1,
            },
            proj_channels: 4,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn random_batch(seed: u64, n: usize, p: usize, s: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lr = Tensor::from_fn(&[n, 3, p, p], |_| rng.random::<f32>());
        let hr = Tensor::from_fn(&[n, 3, s * p, s * p], |_| rng.random::<f32>());
        Batch::new(lr, hr, s).unwrap()
    }

    #[test]
    fn init_copies_online_into_target() {
        let s = init_state(&tiny_config()).unwrap();
        assert!(s.target.params().bit_eq(s.online.params()));
        assert_eq!(s.step, 0);
        for m in [&s.online_moments, &s.proj_moments] {
            assert!(m.m.tensors().chain(m.v.tensors()).all(|t| t.data().iter().all(|&v| v == 0.0)));
        }
        assert!(init_state(&tiny_config()).unwrap().bit_eq(&s));
    }

    #[test]
    fn ema_examples() {
        let one = |v: f32| {
            let mut p = ParamSet::new();
            p.push("w", Tensor::new(vec![1], vec![v]).unwrap());
            p
        };
        for (t, o, beta, expect) in [(1.0, 0.0, 1.0, 1.0), (1.0, 0.0, 0.0, 0.0), (2.0, 1.0, 0.999, 1.999f32)] {
            let mut target = one(t);
            ema_update(&mut target, &one(o), beta).unwrap();
            assert_eq!(target.get("w").unwrap().data()[0], expect);
        }
        let mut other = ParamSet::new();
        other.push("v", Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(ema_update(&mut one(1.0), &other, 0.5).is_err());
    }

    #[test]
    fn ema_contracts_by_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut online = ParamSet::new();
        online.push("w", Tensor::from_fn(&[50], |_| rng.random::<f32>()));
        let mut target = ParamSet::new();
        target.push("w", Tensor::from_fn(&[50], |_| rng.random::<f32>() + 2.0));
        let gap = |t: &ParamSet<f32>| t.get("w").unwrap().max_abs_diff(online.get("w").unwrap()).unwrap() as f64;
        let mut prev = gap(&target);
        for _ in 0..5 {
            ema_update(&mut target, &online, 0.9).unwrap();
            let now = gap(&target);
            assert!((now - 0.9 * prev).abs() < 1e-5, "{now} vs {}", 0.9 * prev);
            prev = now;
        }
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let h = AdamHyper::default();
        let (p, m, v) = adam_scalar(0.0, 1.0, 0.0, 0.0, 1, &h);
        assert!((p as f64 + 1e-4 / (1.0 + 1e-8)).abs() < 1e-10);
        assert_eq!((m, v), (0.1f32, 0.001f32));
        assert_eq!(adam_scalar(0.5, 0.0, 0.0, 0.0, 1, &h).0, 0.5);
    }

    #[test]
    fn adam_rejects_bad_gradients_atomically() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::full(&[2], 1.0f32));
        p.push("b", Tensor::full(&[2], 1.0f32));
        let mut mo = AdamMoments::zeros_like(&p);
        let before = p.clone();
        let grads = vec![Tensor::full(&[2], 1.0), Tensor::new(vec![2], vec![0.0, f32::NAN]).unwrap()];
        assert!(matches!(adam_step(&mut p, &grads, &mut mo, 1, &AdamHyper::default()), Err(Error::NumericFault(_))));
        assert!(p.bit_eq(&before));
        assert!(adam_step(&mut p, &grads[..1], &mut mo, 1, &AdamHyper::default()).is_err());
        assert!(adam_step(&mut p, &[Tensor::full(&[2], 1.0), Tensor::full(&[2], 1.0)], &mut mo, 0, &AdamHyper::default()).is_err());
    }

    #[test]
    fn loss_decomposition_holds_exactly() {
        let mut s = init_state(&tiny_config()).unwrap();
        let alpha = s.config.alpha as f32;
        for i in 0..3 {
            let m = ssc_step(&mut s, &random_batch(i, 2, 6, 2)).unwrap();
            assert_eq!(m.loss_total, m.loss_rec + alpha * m.loss_cons);
            assert!(m.loss_cons > 0.0);
            assert_eq!(m.step, i + 1);
        }
    }

    #[test]
    fn target_follows_previous_online_weights() {
        let mut cfg = tiny_config();
        cfg.ema_beta = 0.5;
        let mut s = init_state(&cfg).unwrap();
        ssc_step(&mut s, &random_batch(0, 2, 6, 2)).unwrap();
        let (online_prev, target_prev) = (s.online.params().clone(), s.target.params().clone());
        ssc_step(&mut s, &random_batch(1, 2, 6, 2)).unwrap();
        let mut expect = target_prev;
        ema_update(&mut expect, &online_prev, 0.5).unwrap();
        assert!(s.target.params().bit_eq(&expect));
        assert!(!s.target.params().bit_eq(s.online.params()));
    }

    #[test]
    fn failed_step_leaves_state_untouched() {
        let mut s = init_state(&tiny_config()).unwrap();
        let before = s.clone();
        let mut b = random_batch(0, 2, 6, 2);
        b.hr.data_mut()[5] = f32::NAN;
        assert!(matches!(ssc_step(&mut s, &b), Err(Error::NumericFault(_))));
        assert!(s.bit_eq(&before));
        let lr = Tensor::zeros(&[2, 3, 6, 4]);
        let hr = Tensor::zeros(&[2, 3, 12, 8]);
        assert!(Batch::new(lr, hr, 2).is_err());
    }

    #[test]
    fn zero_alpha_skips_projection() {
        let mut cfg = tiny_config();
        cfg.alpha = 0.0;
        let mut s = init_state(&cfg).unwrap();
        let proj_before = s.proj.clone();
        let (m, trace) = ssc_step_traced(&mut s, &random_batch(0, 2, 6, 2)).unwrap();
        assert_eq!(m.loss_cons, 0.0);
        assert_eq!(m.loss_total, m.loss_rec);
        assert!(trace.tape_parameters.iter().all(|l| l.starts_with("online/")));
        assert_eq!(s.proj, proj_before);
    }

    #[test]
    fn tape_never_sees_target_weights() {
        let mut s = init_state(&tiny_config()).unwrap();
        let (_, trace) = ssc_step_traced(&mut s, &random_batch(0, 2, 6, 2)).unwrap();
        let expected = s.online.params().len() + s.proj.params().len();
        assert_eq!(trace.tape_parameters.len(), expected);
        assert_eq!(trace.gradient_buffers, expected);
        assert!(!trace.tape_parameters.iter().any(|l| l.starts_with("target")));
    }

    #[test]
    fn equivariant_stand_ins_give_zero_consistency() {
        let up = NearestUpsampler::<f32>::new(2);
        let id = Identity::<f32>::default();
        let objective = Objective {
            online: &up,
            proj: &id,
            target: &up,
            alpha: 1.0f32,
            metric: ConsistencyMetric::L1,
        };
        let b = random_batch(9, 1, 5, 2);
        for i in 0..64 {
            let views = Views {
                online: vec![DihedralOp::from_index(i / 8)],
                target: vec![DihedralOp::from_index(i % 8)],
            };
            let mut g = crate::tensor::Eager::new();
            let l = objective.losses(&mut g, &[], &[], &b.lr, &b.hr, &views).unwrap();
            assert_eq!(l.cons.unwrap().item().unwrap(), 0.0, "pair {i}");
        }
    }

    #[test]
    fn config_entries_round_trip() {
        let mut cfg = tiny_config();
        cfg.learning_rate = 3.3e-4;
        cfg.consistency_metric = ConsistencyMetric::L2;
        let mut back = TrainConfig::default();
        for (line, (k, v)) in cfg.entries().into_iter().enumerate() {
            let e = Entry {
                line,
                key: k.into(),
                value: v,
            };
            assert!(back.set(&e).unwrap());
        }
        assert_eq!(back, cfg);
    }
}
