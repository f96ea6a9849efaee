use std::sync::Arc;

use super::{ops, Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Execution backend for differentiable computations.
///
/// Network code is written once against this trait. [`Tape`] records the
/// computation for a later backward sweep; [`Eager`] evaluates it directly
/// and keeps nothing but values, which is how the EMA target runs.
pub trait Graph<F: Scalar> {
    type Value: Clone;

    /// Trainable input; `label` names it in the parameter namespace.
    fn parameter(&mut self, label: &str, value: &Tensor<F>) -> Self::Value;
    fn constant(&mut self, value: Tensor<F>) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<F>;

    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value, pad: usize) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, factor: F) -> Self::Value;
    fn pixel_shuffle(&mut self, x: &Self::Value, r: usize) -> Result<Self::Value>;
    fn gather(&mut self, x: &Self::Value, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Self::Value>;
    fn l1_loss(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn l2_loss(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sum(&mut self, x: &Self::Value) -> Self::Value;
}

impl<F: Scalar> Graph<F> for Tape<F> {
    type Value = Var;

    fn parameter(&mut self, label: &str, value: &Tensor<F>) -> Var {
        Tape::parameter(self, label, value.clone())
    }

    fn constant(&mut self, value: Tensor<F>) -> Var {
        Tape::constant(self, value)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<F> {
        Tape::value(self, *v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, pad: usize) -> Result<Var> {
        Tape::conv2d(self, *x, *w, *b, pad)
    }

    fn relu(&mut self, x: &Var) -> Var {
        Tape::relu(self, *x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::sub(self, *a, *b)
    }

    fn scale(&mut self, x: &Var, factor: F) -> Var {
        Tape::scale(self, *x, factor)
    }

    fn pixel_shuffle(&mut self, x: &Var, r: usize) -> Result<Var> {
        Tape::pixel_shuffle(self, *x, r)
    }

    fn gather(&mut self, x: &Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        Tape::gather(self, *x, index, shape)
    }

    fn l1_loss(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::l1_loss(self, *a, *b)
    }

    fn l2_loss(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::l2_loss(self, *a, *b)
    }

    fn sum(&mut self, x: &Var) -> Var {
        Tape::sum(self, *x)
    }
}

/// Tape-free evaluation.
///
/// With [`Eager::tracing_kinks`] it additionally records which side of every
/// non-differentiable point (ReLU at 0, |a-b| at a=b) each element fell on,
/// so finite-difference checks can tell when a perturbation crossed one.
#[derive(Debug, Default)]
pub struct Eager {
    kinks: Option<Vec<i8>>,
}

impl Eager {
    pub fn new() -> Self {
        Eager { kinks: None }
    }

    pub fn tracing_kinks() -> Self {
        Eager { kinks: Some(Vec::new()) }
    }

    pub fn kink_signature(&self) -> Option<&[i8]> {
        self.kinks.as_deref()
    }

    fn trace<F: Scalar>(&mut self, values: impl Iterator<Item = F>) {
        if let Some(k) = &mut self.kinks {
            k.extend(values.map(|v| {
                if v > F::zero() {
                    1
                } else if v < F::zero() {
                    -1
                } else {
                    0
                }
            }));
        }
    }
}

impl<F: Scalar> Graph<F> for Eager {
    type Value = Tensor<F>;

    fn parameter(&mut self, _label: &str, value: &Tensor<F>) -> Tensor<F> {
        value.clone()
    }

    fn constant(&mut self, value: Tensor<F>) -> Tensor<F> {
        value
    }

    fn value<'a>(&'a self, v: &'a Tensor<F>) -> &'a Tensor<F> {
        v
    }

    fn conv2d(&mut self, x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>, pad: usize) -> Result<Tensor<F>> {
        ops::conv2d(x, w, b, pad)
    }

    fn relu(&mut self, x: &Tensor<F>) -> Tensor<F> {
        self.trace(x.data().iter().copied());
        ops::relu(x)
    }

    fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        ops::add(a, b)
    }

    fn sub(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        ops::sub(a, b)
    }

    fn scale(&mut self, x: &Tensor<F>, factor: F) -> Tensor<F> {
        ops::scale(x, factor)
    }

    fn pixel_shuffle(&mut self, x: &Tensor<F>, r: usize) -> Result<Tensor<F>> {
        ops::pixel_shuffle(x, r)
    }

    fn gather(&mut self, x: &Tensor<F>, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Tensor<F>> {
        ops::gather(x, &index, shape)
    }

    fn l1_loss(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let out = ops::l1_loss(a, b)?;
        self.trace(a.data().iter().zip(b.data()).map(|(&x, &y)| x - y));
        Ok(out)
    }

    fn l2_loss(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        ops::l2_loss(a, b)
    }

    fn sum(&mut self, x: &Tensor<F>) -> Tensor<F> {
        ops::sum(x)
    }
}
