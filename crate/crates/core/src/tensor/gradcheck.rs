//! Finite-difference verification of tape gradients, run in `f64`.
//!
//! A central difference is only meaningful when both probes stay on the same
//! smooth piece of a piecewise-linear function. Every probe is evaluated with
//! [`Eager::tracing_kinks`]; elements whose `+eps` or `-eps` probe lands on a
//! different side of any ReLU or L1 kink are skipped and counted.

use super::{Eager, Graph, Tape, Tensor};
use crate::error::Result;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Lower bound on the relative-error denominator, so that gradients that are
/// zero up to rounding noise are compared absolutely.
pub const DENOMINATOR_FLOOR: f64 = 1e-4;

/// A scalar-valued function of several tensors, written against [`Graph`].
pub trait Differentiable {
    fn eval<G: Graph<f64>>(&self, graph: &mut G, inputs: &[G::Value]) -> Result<G::Value>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Analytic gradients of `f` at `inputs`, from one tape sweep. Inputs the loss
/// does not reach get a zero gradient.
pub fn analytic_gradients<D: Differentiable>(f: &D, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.parameter(format!("input{i}"), t.clone()))
        .collect();
    let loss = f.eval(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

fn eval_traced<D: Differentiable>(f: &D, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<i8>)> {
    let mut g = Eager::tracing_kinks();
    let vals: Vec<_> = inputs.to_vec();
    let out = f.eval(&mut g, &vals)?;
    let sig = g.kink_signature().unwrap_or_default().to_vec();
    Ok((out.item()?, sig))
}

/// Compares tape gradients of `f` with central differences over every input element.
pub fn grad_check<D: Differentiable>(f: &D, inputs: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(f, inputs)?;
    compare_with_finite_differences(inputs, &analytic, epsilon, |xs| eval_traced(f, xs))
}

/// Core comparison loop; `eval` returns the function value and a kink signature.
pub fn compare_with_finite_differences(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    epsilon: f64,
    mut eval: impl FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<i8>)>,
) -> Result<GradCheckReport> {
    let (_, base_sig) = eval(inputs)?;
    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + epsilon;
            let (fp, sp) = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - epsilon;
            let (fm, sm) = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * epsilon);
            let err = relative_error(grad.data()[ei], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, ei));
            }
        }
    }
    Ok(report)
}
