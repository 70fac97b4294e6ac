use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::optim::ParamSet;
use crate::tensor::Tensor;

/// Anything trainable by [`crate::nn::fit`].
pub trait Model: Clone + Sync {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
}

/// Puts every parameter on the tape. Returned vars follow the `ParamSet` order.
pub fn bind(g: &mut Graph, params: &ParamSet, requires_grad: bool) -> Result<Vec<Var>> {
    params
        .tensors()
        .iter()
        .map(|t| g.leaf(t.clone(), requires_grad))
        .collect()
}

/// `x * w + b` with `w: in x out` and `b: 1 x out`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Glorot-uniform weight matrix.
pub(crate) fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Pushes a dense layer's weight and bias; returns the weight slot.
pub(crate) fn push_dense<R: Rng + ?Sized>(
    params: &mut ParamSet,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> usize {
    let w = params.push(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
    params.push(format!("{name}.bias"), Tensor::zeros(1, fan_out));
    w
}
