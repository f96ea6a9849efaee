use std::sync::Arc;

use super::{ops, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, F),
    PixelShuffle(Var, usize),
    Gather { x: Var, index: Arc<[usize]> },
    L1(Var, Var),
    L2(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    label: Option<String>,
}

/// Wengert list of the operations of one forward pass.
///
/// Nodes are appended in evaluation order, so every input of node `k` has an
/// index below `k` and a single reverse sweep is a valid topological order.
#[derive(Debug)]
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Labels of every trainable leaf, in registration order.
    pub fn parameter_labels(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .filter_map(|n| n.label.as_deref())
            .collect()
    }

    /// Leaf that receives a gradient.
    pub fn parameter(&mut self, label: impl Into<String>, value: Tensor<F>) -> Var {
        self.push_node(value, Op::Leaf, true, Some(label.into()))
    }

    /// Leaf treated as a constant; no gradient is ever allocated for it.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_node(value, Op::Leaf, false, None)
    }

    fn push_node(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, label: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad, None)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), pad)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let out = ops::scale(self.value(x), factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = ops::pixel_shuffle(self.value(x), r)?;
        Ok(self.push(out, Op::PixelShuffle(x, r), &[x]))
    }

    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let out = ops::gather(self.value(x), &index, shape)?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::l1_loss(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::L1(a, b), &[a, b]))
    }

    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::l2_loss(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::L2(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = ops::sum(self.value(x));
        self.push(out, Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`, seeding its gradient with 1.
    ///
    /// Gradients from multiple consumers of a node are summed. Only nodes that
    /// (transitively) depend on a parameter ever get a gradient buffer.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff("loss does not depend on any parameter".into()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), F::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, g, &mut grads)?;
        }

        let mut params = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                params.push((Var(i), g));
            }
        }
        Ok(Gradients { grads: params })
    }

    fn propagate(
        &self,
        op: &Op<F>,
        g: Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let (gx, gw, gb) = ops::conv2d_backward(self.value(x), self.value(w), pad, &g)?;
                self.accumulate(grads, x, gx);
                self.accumulate(grads, w, gw);
                self.accumulate(grads, b, gb);
            }
            Op::Relu(x) => {
                let gx = ops::relu_backward(self.value(x), &g);
                self.accumulate(grads, x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, b, ops::scale(&g, -F::one()));
                self.accumulate(grads, a, g);
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, x, ops::scale(&g, factor));
            }
            Op::PixelShuffle(x, r) => {
                self.accumulate(grads, x, ops::pixel_unshuffle(&g, r)?);
            }
            Op::Gather { x, ref index } => {
                let gx = ops::gather_backward(self.value(x).shape(), index, &g);
                self.accumulate(grads, x, gx);
            }
            Op::L1(a, b) => {
                let up = g.item()?;
                let (va, vb) = (self.value(a), self.value(b));
                self.accumulate(grads, a, ops::l1_loss_backward(va, vb, up));
                if self.requires_grad(b) {
                    self.accumulate(grads, b, ops::l1_loss_backward(vb, va, up));
                }
            }
            Op::L2(a, b) => {
                let up = g.item()?;
                let (va, vb) = (self.value(a), self.value(b));
                self.accumulate(grads, a, ops::l2_loss_backward(va, vb, up));
                if self.requires_grad(b) {
                    self.accumulate(grads, b, ops::l2_loss_backward(vb, va, up));
                }
            }
            Op::Sum(x) => {
                let up = g.item()?;
                self.accumulate(grads, x, Tensor::full(self.value(x).shape(), up));
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients of the trainable leaves reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients<F: Scalar = f32> {
    grads: Vec<(Var, Tensor<F>)>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads
            .binary_search_by_key(&v.0, |(var, _)| var.0)
            .ok()
            .map(|i| &self.grads[i].1)
    }

    /// Number of gradient buffers that survived the sweep (one per reached leaf).
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
