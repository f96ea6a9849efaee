//! Built-in correctness checks, run by the `selfcheck` command.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::DihedralOp;
use crate::error::Result;
use crate::models::{Identity, Module, NearestUpsampler, ProjectionHead, SrNetConfig, SrNetwork};
use crate::tensor::gradcheck::{
    compare_with_finite_differences, grad_check, Differentiable, GradCheckReport, EPSILON, TOLERANCE,
};
use crate::tensor::{ops, Eager, Graph, Tensor};
use crate::train::{adam_scalar, ema_update, AdamHyper, ConsistencyMetric, Objective, Views};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Signature of [`ops::conv2d_backward`] in checking precision.
pub type ConvBackward =
    fn(&Tensor<f64>, &Tensor<f64>, usize, &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Layer op followed by an L2 loss against a fixed random target.
macro_rules! probe {
    ($name:ident, |$g:ident, $x:ident| $body:expr) => {
        struct $name(Tensor<f64>);

        impl Differentiable for $name {
            fn eval<G: Graph<f64>>(&self, $g: &mut G, $x: &[G::Value]) -> Result<G::Value> {
                let out = $body;
                let t = $g.constant(self.0.clone());
                $g.l2_loss(&out, &t)
            }
        }
    };
}

probe!(ConvProbe, |g, x| g.conv2d(&x[0], &x[1], &x[2], 1)?);
probe!(ReluProbe, |g, x| g.relu(&x[0]));
probe!(ShuffleProbe, |g, x| g.pixel_shuffle(&x[0], 2)?);
probe!(AddProbe, |g, x| g.add(&x[0], &x[1])?);
probe!(SubProbe, |g, x| g.sub(&x[0], &x[1])?);
probe!(ScaleProbe, |g, x| g.scale(&x[0], -1.7));
probe!(DihedralProbe, |g, x| {
    let (index, shape) = DihedralOp::from_index(5).index_map(g.value(&x[0]).shape())?;
    g.gather(&x[0], index.into(), shape)?
});

struct L1Probe;

impl Differentiable for L1Probe {
    fn eval<G: Graph<f64>>(&self, g: &mut G, x: &[G::Value]) -> Result<G::Value> {
        g.l1_loss(&x[0], &x[1])
    }
}

struct L2Probe;

impl Differentiable for L2Probe {
    fn eval<G: Graph<f64>>(&self, g: &mut G, x: &[G::Value]) -> Result<G::Value> {
        g.l2_loss(&x[0], &x[1])
    }
}

struct SumProbe;

impl Differentiable for SumProbe {
    fn eval<G: Graph<f64>>(&self, g: &mut G, x: &[G::Value]) -> Result<G::Value> {
        let y = g.scale(&x[0], 0.3);
        Ok(g.sum(&y))
    }
}

fn merge(acc: &mut GradCheckReport, r: GradCheckReport) {
    if r.max_rel_error >= acc.max_rel_error {
        acc.max_rel_error = r.max_rel_error;
        acc.worst = r.worst;
    }
    acc.checked += r.checked;
    acc.skipped_kinks += r.skipped_kinks;
}

fn empty_report() -> GradCheckReport {
    GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    }
}

/// Conv gradient check with a caller-supplied backward pass, so that a broken
/// implementation can be shown to fail.
pub fn conv_gradcheck_with(backward: ConvBackward, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[2, 3, 5, 4]);
    let w = uniform(&mut rng, &[4, 3, 3, 3]);
    let b = uniform(&mut rng, &[4]);
    let target = uniform(&mut rng, &[2, 4, 5, 4]);
    let out = ops::conv2d(&x, &w, &b, 1)?;
    let upstream = ops::l2_loss_backward(&out, &target, 1.0);
    let (gx, gw, gb) = backward(&x, &w, 1, &upstream)?;
    compare_with_finite_differences(&[x, w, b], &[gx, gw, gb], EPSILON, |xs| {
        let out = ops::conv2d(&xs[0], &xs[1], &xs[2], 1)?;
        Ok((ops::l2_loss(&out, &target)?.item()?, Vec::new()))
    })
}

/// Gradient checks of every layer op over `seeds` random draws; one report per op.
pub fn layer_gradchecks(seeds: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out: Vec<(&'static str, GradCheckReport)> = Vec::new();
    let mut add = |name: &'static str, r: GradCheckReport| match out.iter_mut().find(|(n, _)| *n == name) {
        Some((_, acc)) => merge(acc, r),
        None => out.push((name, r)),
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
        let x = uniform(&mut rng, &[2, 3, 5, 4]);
        let w = uniform(&mut rng, &[4, 3, 3, 3]);
        let b = uniform(&mut rng, &[4]);
        add("conv2d", grad_check(&ConvProbe(uniform(&mut rng, &[2, 4, 5, 4])), &[x, w, b], EPSILON)?);

        let x = uniform(&mut rng, &[2, 3, 4, 4]);
        add("relu", grad_check(&ReluProbe(uniform(&mut rng, &[2, 3, 4, 4])), &[x], EPSILON)?);

        let x = uniform(&mut rng, &[1, 8, 3, 2]);
        add("pixel_shuffle", grad_check(&ShuffleProbe(uniform(&mut rng, &[1, 2, 6, 4])), &[x], EPSILON)?);

        let (a, c) = (uniform(&mut rng, &[2, 3, 3]), uniform(&mut rng, &[2, 3, 3]));
        add("l1_loss", grad_check(&L1Probe, &[a.clone(), c.clone()], EPSILON)?);
        add("l2_loss", grad_check(&L2Probe, &[a.clone(), c.clone()], EPSILON)?);

        let t = uniform(&mut rng, &[2, 3, 3]);
        add("add", grad_check(&AddProbe(t.clone()), &[a.clone(), c.clone()], EPSILON)?);
        add("sub", grad_check(&SubProbe(t.clone()), &[a.clone(), c.clone()], EPSILON)?);
        add("scale", grad_check(&ScaleProbe(t), std::slice::from_ref(&a), EPSILON)?);
        add("sum", grad_check(&SumProbe, &[a], EPSILON)?);

        let x = uniform(&mut rng, &[2, 4, 4]);
        add("dihedral gather", grad_check(&DihedralProbe(uniform(&mut rng, &[2, 4, 4])), &[x], EPSILON)?);
    }
    Ok(out)
}

/// Full training objective on a tiny network in `f64`: inputs are the online
/// parameters followed by the projection head parameters.
pub struct CompositeLoss {
    pub online: SrNetwork<f64>,
    pub proj: ProjectionHead<f64>,
    pub target: SrNetwork<f64>,
    pub lr: Tensor<f64>,
    pub hr: Tensor<f64>,
    pub views: Views,
    pub alpha: f64,
    pub metric: ConsistencyMetric,
}

impl CompositeLoss {
    /// C=4, B=1, scale 2, projection width 4, two 6x6 LR patches.
    pub fn random(seed: u64, metric: ConsistencyMetric) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SrNetConfig {
            scale: 2,
            channels: 4,
            num_blocks: 1,
        };
        let online = SrNetwork::build(cfg, &mut rng)?;
        let target = SrNetwork::build(cfg, &mut rng)?;
        let proj = ProjectionHead::build(4, &mut rng)?;
        let lr = Tensor::from_fn(&[2, 3, 6, 6], |_| rng.random_range(0.0..1.0));
        let hr = Tensor::from_fn(&[2, 3, 12, 12], |_| rng.random_range(0.0..1.0));
        let views = Views::draw(&mut rng, 2);
        Ok(CompositeLoss {
            online,
            proj,
            target,
            lr,
            hr,
            views,
            alpha: 0.5,
            metric,
        })
    }

    pub fn inputs(&self) -> Vec<Tensor<f64>> {
        self.online.params().tensors().chain(self.proj.params().tensors()).cloned().collect()
    }
}

impl Differentiable for CompositeLoss {
    fn eval<G: Graph<f64>>(&self, g: &mut G, x: &[G::Value]) -> Result<G::Value> {
        let (on, pr) = x.split_at(self.online.params().len());
        let objective = Objective {
            online: &self.online,
            proj: &self.proj,
            target: &self.target,
            alpha: self.alpha,
            metric: self.metric,
        };
        Ok(objective.losses(g, on, pr, &self.lr, &self.hr, &self.views)?.total)
    }
}

pub fn composite_gradcheck(seeds: u64) -> Result<GradCheckReport> {
    let mut acc = empty_report();
    for seed in 0..seeds {
        let metric = if seed % 2 == 0 { ConsistencyMetric::L1 } else { ConsistencyMetric::L2 };
        let f = CompositeLoss::random(0xc0de_0000 + seed, metric)?;
        merge(&mut acc, grad_check(&f, &f.inputs(), EPSILON)?);
    }
    Ok(acc)
}

/// Rotates a row-major `h x w` grid a quarter turn counter-clockwise.
fn rot90(grid: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    for i in 0..w {
        for j in 0..h {
            out[i * h + j] = grid[j * w + (w - 1 - i)];
        }
    }
    out
}

fn mirror(grid: &[f32], h: usize, w: usize) -> Vec<f32> {
    (0..h).flat_map(|i| (0..w).rev().map(move |j| grid[i * w + j])).collect()
}

/// Direct definition of the action: flip first (if any), then quarter turns.
fn reference_action(g: DihedralOp, grid: &[f32], n: usize) -> Vec<f32> {
    let mut out = if g.flip() { mirror(grid, n, n) } else { grid.to_vec() };
    for _ in 0..g.quarter_turns() {
        out = rot90(&out, n, n);
    }
    out
}

/// Inverses and all 512 composition triples, against the action on a random 7x7 image.
pub fn dihedral_check() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = Tensor::from_fn(&[1, 1, 7, 7], |_| rng.random::<f32>());
    let act = |g: DihedralOp, t: &Tensor<f32>| g.apply(t);
    for g in DihedralOp::ALL {
        if act(g, &img)?.data() != reference_action(g, img.data(), 7).as_slice() {
            return Ok((false, format!("{g} disagrees with the reference action")));
        }
        if !act(g.inverse(), &act(g, &img)?)?.bit_eq(&img) || !act(g, &act(g.inverse(), &img)?)?.bit_eq(&img) {
            return Ok((false, format!("inverse of {g}")));
        }
    }
    let mut triples = 0;
    for a in DihedralOp::ALL {
        for b in DihedralOp::ALL {
            for c in DihedralOp::ALL {
                let left = DihedralOp::compose(DihedralOp::compose(a, b), c);
                let right = DihedralOp::compose(a, DihedralOp::compose(b, c));
                let chained = act(a, &act(b, &act(c, &img)?)?)?;
                if left != right || !act(left, &img)?.bit_eq(&chained) {
                    return Ok((false, format!("triple ({a}, {b}, {c})")));
                }
                triples += 1;
            }
        }
    }
    Ok((true, format!("8 inverses, {triples} triples")))
}

pub fn ema_check() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let make = |rng: &mut ChaCha8Rng| {
        let mut p = crate::models::ParamSet::new();
        p.push("w", Tensor::from_fn(&[257], |_| rng.random_range(-2.0f32..2.0)));
        p
    };
    let (target, online) = (make(&mut rng), make(&mut rng));
    let mut t0 = target.clone();
    ema_update(&mut t0, &online, 0.0)?;
    let mut t1 = target.clone();
    ema_update(&mut t1, &online, 1.0)?;
    let mut tb = target.clone();
    ema_update(&mut tb, &online, 0.999)?;
    let within_ulp = tb.tensors().zip(target.tensors()).zip(online.tensors()).all(|((r, t), o)| {
        r.data().iter().zip(t.data()).zip(o.data()).all(|((&r, &t), &o)| {
            let exact = 0.999 * t as f64 + 0.001 * o as f64;
            let ulp = (exact as f32).abs().max(f32::MIN_POSITIVE);
            let ulp = f32::from_bits(ulp.to_bits() + 1) - ulp;
            (r as f64 - exact).abs() <= ulp as f64
        })
    });
    let ok = t0.bit_eq(&online) && t1.bit_eq(&target) && within_ulp;
    Ok((ok, format!("beta=0 copy, beta=1 frozen, beta=0.999 within 1 ulp: {ok}")))
}

/// Consistency loss with nearest-neighbour upsamplers for both networks and an
/// identity projection, over every (online view, target view) pair.
pub fn equivariance_zero_check() -> Result<(bool, String)> {
    let up = NearestUpsampler::<f32>::new(2);
    let id = Identity::<f32>::default();
    let objective = Objective {
        online: &up,
        proj: &id,
        target: &up,
        alpha: 1.0f32,
        metric: ConsistencyMetric::L1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let lr = Tensor::from_fn(&[1, 3, 5, 5], |_| rng.random::<f32>());
    let hr = Tensor::from_fn(&[1, 3, 10, 10], |_| rng.random::<f32>());
    let mut nonzero = Vec::new();
    for i in 0..64 {
        let views = Views {
            online: vec![DihedralOp::from_index(i / 8)],
            target: vec![DihedralOp::from_index(i % 8)],
        };
        let l = objective.losses(&mut Eager::new(), &[], &[], &lr, &hr, &views)?;
        if l.cons.map(|c| c.item()).transpose()? != Some(0.0) {
            nonzero.push(i);
        }
    }
    Ok((nonzero.is_empty(), format!("64 pairs, nonzero at {nonzero:?}")))
}

pub fn adam_check() -> (bool, String) {
    let h = AdamHyper::default();
    let (mut p, mut m, mut v) = (0.0f32, 0.0f32, 0.0f32);
    let (mut em, mut ev, mut ep) = (0.0f64, 0.0f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for t in 1..=5u64 {
        (p, m, v) = adam_scalar(p, 1.0, m, v, t, &h);
        em = 0.9 * em + 0.1;
        ev = 0.999 * ev + 0.001;
        let mh = em / (1.0 - 0.9f64.powi(t as i32));
        let vh = ev / (1.0 - 0.999f64.powi(t as i32));
        ep -= 1e-4 * mh / (vh.sqrt() + 1e-8);
        worst = worst.max(((p as f64 - ep) / ep).abs());
    }
    let first = adam_scalar(0.0, 1.0, 0.0, 0.0, 1, &h).0 as f64;
    let first_err = (first + 1e-4 / (1.0 + 1e-8)).abs();
    (
        worst < 1e-6 && first_err <= 1e-10,
        format!("5-step max rel err {worst:.2e}, first-step err {first_err:.2e}"),
    )
}

/// Runs every check; `conv_backward` is normally [`ops::conv2d_backward`].
pub fn run_all_with(conv_backward: ConvBackward) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<(bool, String)>| {
        out.push(match r {
            Ok((ok, d)) => CheckResult::new(name, ok, d),
            Err(e) => CheckResult::new(name, false, format!("error: {e}")),
        })
    };
    let fmt = |r: &GradCheckReport| {
        format!(
            "max rel err {:.2e} over {} elements ({} kink crossings skipped)",
            r.max_rel_error, r.checked, r.skipped_kinks
        )
    };

    let start = Instant::now();
    push(
        "gradcheck conv2d backward",
        (0..5)
            .map(|s| conv_gradcheck_with(conv_backward, s))
            .try_fold(empty_report(), |mut acc, r| {
                merge(&mut acc, r?);
                Ok(acc)
            })
            .map(|r| (r.passes(TOLERANCE), fmt(&r))),
    );
    match layer_gradchecks(5) {
        Ok(reports) => {
            for (name, r) in reports {
                push(&format!("gradcheck {name}"), Ok((r.passes(TOLERANCE), fmt(&r))));
            }
        }
        Err(e) => push("gradcheck layer ops", Err(e)),
    }
    push(
        "gradcheck composite objective",
        composite_gradcheck(20).map(|r| (r.passes(TOLERANCE), format!("{} in {:.1?}", fmt(&r), start.elapsed()))),
    );
    push("dihedral group axioms", dihedral_check());
    push("ema identities", ema_check());
    push("equivariance zero consistency", equivariance_zero_check());
    push("adam scalar oracle", Ok(adam_check()));
    out
}

pub fn run_all() -> Vec<CheckResult> {
    run_all_with(ops::conv2d_backward)
}
