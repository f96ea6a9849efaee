//! EDSR-style super-resolution network and the convolutional projection head.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Eager, Graph, Scalar, Tensor};

pub const IO_CHANNELS: usize = 3;
const KERNEL: usize = 3;
const PAD: usize = 1;

/// Ordered, named parameter tensors. The order is part of the contract: EMA
/// pairing, optimizer moments and checkpoints all walk it positionally.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F = f32> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout<G: Scalar>(&self, other: &ParamSet<G>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.same_layout(other) && self.tensors().zip(other.tensors()).all(|(a, b)| a.bit_eq(b))
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// A network whose forward pass can run on any [`Graph`].
pub trait Module<F: Scalar> {
    fn params(&self) -> &ParamSet<F>;

    fn params_mut(&mut self) -> &mut ParamSet<F>;

    /// `params` are this module's parameters lifted into `graph`, in [`ParamSet`] order.
    fn forward<G: Graph<F>>(&self, graph: &mut G, params: &[G::Value], x: &G::Value) -> Result<G::Value>;

    /// Registers every parameter as a trainable graph input labelled `prefix/name`.
    fn lift<G: Graph<F>>(&self, graph: &mut G, prefix: &str) -> Vec<G::Value> {
        self.params()
            .iter()
            .map(|(n, t)| graph.parameter(&format!("{prefix}/{n}"), t))
            .collect()
    }

    /// Plain evaluation, no gradient bookkeeping.
    fn infer(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Eager::new();
        let params: Vec<Tensor<F>> = self.params().tensors().cloned().collect();
        self.forward(&mut g, &params, x)
    }
}

/// (name, cin, cout) of each 3x3 convolution, in parameter order.
type ConvLayout = Vec<(String, usize, usize)>;

fn init_convs<F: Scalar, R: Rng + ?Sized>(layout: &ConvLayout, rng: &mut R) -> ParamSet<F> {
    let mut params = ParamSet::new();
    for (name, cin, cout) in layout {
        let fan_in = cin * KERNEL * KERNEL;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[*cout, *cin, KERNEL, KERNEL], |_| F::of(rng.random_range(-bound..bound)));
        params.push(format!("{name}.weight"), w);
        params.push(format!("{name}.bias"), Tensor::zeros(&[*cout]));
    }
    params
}

fn matches_layout<F: Scalar>(layout: &ConvLayout, params: &ParamSet<F>) -> bool {
    let expected = layout.iter().flat_map(|(name, cin, cout)| {
        [
            (format!("{name}.weight"), vec![*cout, *cin, KERNEL, KERNEL]),
            (format!("{name}.bias"), vec![*cout]),
        ]
    });
    params.len() == 2 * layout.len()
        && expected.zip(params.iter()).all(|((en, es), (n, t))| en == n && es == t.shape())
}

fn check_rgb_input<F: Scalar>(op: &'static str, x: &Tensor<F>) -> Result<()> {
    match x.shape() {
        [_, c, _, _] if *c == IO_CHANNELS => Ok(()),
        s => Err(Error::shape(op, format!("expected [N, 3, H, W], got {s:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SrNetConfig {
    pub scale: usize,
    pub channels: usize,
    pub num_blocks: usize,
}

impl Default for SrNetConfig {
    fn default() -> Self {
        SrNetConfig {
            scale: 2,
            channels: 16,
            num_blocks: 2,
        }
    }
}

impl SrNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.scale) {
            return Err(Error::Config(format!("scale must be in 1..=4, got {}", self.scale)));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(())
    }
}

/// EDSR-lite: head conv, residual blocks (conv-ReLU-conv plus identity) with a
/// long skip back to the head output, then conv, pixel shuffle and a final conv.
#[derive(Clone, Debug, PartialEq)]
pub struct SrNetwork<F = f32> {
    config: SrNetConfig,
    params: ParamSet<F>,
}

impl<F: Scalar> SrNetwork<F> {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn build<R: Rng + ?Sized>(config: SrNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = init_convs(&Self::layout(&config), rng);
        Ok(SrNetwork { config, params })
    }

    fn layout(config: &SrNetConfig) -> ConvLayout {
        let c = config.channels;
        let mut layout = vec![("head".to_string(), IO_CHANNELS, c)];
        for b in 0..config.num_blocks {
            layout.push((format!("blocks.{b}.conv1"), c, c));
            layout.push((format!("blocks.{b}.conv2"), c, c));
        }
        layout.push(("tail".into(), c, c * config.scale * config.scale));
        layout.push(("final".into(), c, IO_CHANNELS));
        layout
    }

    /// Rebuilds a network around existing parameters, checking their layout.
    pub fn from_params(config: SrNetConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        if !matches_layout(&Self::layout(&config), &params) {
            return Err(Error::shape("sr network", "parameter layout does not match config"));
        }
        Ok(SrNetwork { config, params })
    }

    pub fn config(&self) -> SrNetConfig {
        self.config
    }

    pub fn cast<G: Scalar>(&self) -> SrNetwork<G> {
        SrNetwork {
            config: self.config,
            params: self.params.cast(),
        }
    }
}

impl<F: Scalar> Module<F> for SrNetwork<F> {
    fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    fn forward<G: Graph<F>>(&self, g: &mut G, p: &[G::Value], x: &G::Value) -> Result<G::Value> {
        check_rgb_input("forward_sr", g.value(x))?;
        if p.len() != self.params.len() {
            return Err(Error::shape("forward_sr", format!("{} lifted parameters, expected {}", p.len(), self.params.len())));
        }
        let head = g.conv2d(x, &p[0], &p[1], PAD)?;
        let mut body = head.clone();
        for b in 0..self.config.num_blocks {
            let i = 2 + 4 * b;
            let t = g.conv2d(&body, &p[i], &p[i + 1], PAD)?;
            let t = g.relu(&t);
            let t = g.conv2d(&t, &p[i + 2], &p[i + 3], PAD)?;
            body = g.add(&body, &t)?;
        }
        if self.config.num_blocks > 0 {
            body = g.add(&body, &head)?;
        }
        let i = 2 + 4 * self.config.num_blocks;
        let up = g.conv2d(&body, &p[i], &p[i + 1], PAD)?;
        let up = g.pixel_shuffle(&up, self.config.scale)?;
        g.conv2d(&up, &p[i + 2], &p[i + 3], PAD)
    }
}

/// Three 3x3 convolutions (3 -> C_p -> C_p -> 3) with ReLU after the first two.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<F = f32> {
    channels: usize,
    params: ParamSet<F>,
}

impl<F: Scalar> ProjectionHead<F> {
    pub fn build<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("projection channels must be positive".into()));
        }
        let params = init_convs(&Self::layout(channels), rng);
        Ok(ProjectionHead { channels, params })
    }

    fn layout(channels: usize) -> ConvLayout {
        vec![
            ("conv1".into(), IO_CHANNELS, channels),
            ("conv2".into(), channels, channels),
            ("conv3".into(), channels, IO_CHANNELS),
        ]
    }

    pub fn from_params(channels: usize, params: ParamSet<F>) -> Result<Self> {
        if channels == 0 || !matches_layout(&Self::layout(channels), &params) {
            return Err(Error::shape("projection head", "parameter layout does not match config"));
        }
        Ok(ProjectionHead { channels, params })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cast<G: Scalar>(&self) -> ProjectionHead<G> {
        ProjectionHead {
            channels: self.channels,
            params: self.params.cast(),
        }
    }
}

impl<F: Scalar> Module<F> for ProjectionHead<F> {
    fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    fn forward<G: Graph<F>>(&self, g: &mut G, p: &[G::Value], x: &G::Value) -> Result<G::Value> {
        check_rgb_input("forward_proj", g.value(x))?;
        let h = g.conv2d(x, &p[0], &p[1], PAD)?;
        let h = g.relu(&h);
        let h = g.conv2d(&h, &p[2], &p[3], PAD)?;
        let h = g.relu(&h);
        g.conv2d(&h, &p[4], &p[5], PAD)
    }
}

/// Parameter-free nearest-neighbour upsampler. It commutes exactly with every
/// flip/rotation, which makes it a probe for the view-alignment logic.
#[derive(Clone, Debug)]
pub struct NearestUpsampler<F = f32> {
    scale: usize,
    params: ParamSet<F>,
}

impl<F: Scalar> NearestUpsampler<F> {
    pub fn new(scale: usize) -> Self {
        NearestUpsampler {
            scale,
            params: ParamSet::new(),
        }
    }
}

impl<F: Scalar> Module<F> for NearestUpsampler<F> {
    fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    fn forward<G: Graph<F>>(&self, g: &mut G, _p: &[G::Value], x: &G::Value) -> Result<G::Value> {
        let &[n, c, h, w] = g.value(x).shape() else {
            return Err(Error::shape("nearest", "expected [N, C, H, W]"));
        };
        let s = self.scale;
        let (oh, ow) = (h * s, w * s);
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    index.push((plane * h + y / s) * w + xx / s);
                }
            }
        }
        g.gather(x, Arc::from(index), vec![n, c, oh, ow])
    }
}

/// Passes its input through unchanged.
#[derive(Clone, Debug)]
pub struct Identity<F = f32> {
    params: ParamSet<F>,
}

impl<F: Scalar> Default for Identity<F> {
    fn default() -> Self {
        Identity { params: ParamSet::new() }
    }
}

impl<F: Scalar> Module<F> for Identity<F> {
    fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    fn forward<G: Graph<F>>(&self, _g: &mut G, _p: &[G::Value], x: &G::Value) -> Result<G::Value> {
        Ok(x.clone())
    }
}
