//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-5,
            rel: 1e-3,
            abs: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Mismatches explained by a kink (ReLU, `|x|`) inside the step: the central
    /// difference straddles it, but one one-sided difference agrees.
    pub kinks: usize,
    pub max_abs_err: f64,
    /// Worst failing coordinate as `(input, flat index, analytic, numeric)`.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.kinks += other.kinks;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if self.worst.is_none() {
            self.worst = other.worst;
        }
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar loss, got {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Compares the analytic gradient of `f` with respect to every input against
/// central differences. At most `per_input` coordinates of each input are
/// probed, chosen by `seed`.
pub fn check<F>(inputs: &[Tensor], f: F, per_input: usize, seed: u64, tol: Tolerance) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect::<Result<_>>()?;
    let loss = f(&mut g, &vars)?;
    scalar_of(&g, loss)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let mut t = t.clone();
                if j == which {
                    t.data_mut()[idx] += delta;
                }
                g.leaf(t, false)
            })
            .collect::<Result<_>>()?;
        let loss = f(&mut g, &vars)?;
        scalar_of(&g, loss)
    };

    let mut report = GradCheckReport::default();
    let mut rng = rng::stream(seed, Purpose::Probe, 0);
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, per_input).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let (up, down) = (eval(i, idx, tol.step)?, eval(i, idx, -tol.step)?);
            let numeric = (up - down) / (2.0 * tol.step);
            let a = analytic[i][idx];
            let err = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(err);
            let agrees = |n: f64| {
                let e = (a - n).abs();
                e <= tol.abs || e <= tol.rel * a.abs().max(n.abs())
            };
            if agrees(numeric) {
                continue;
            }
            let centre = eval(i, idx, 0.0)?;
            if agrees((up - centre) / tol.step) || agrees((centre - down) / tol.step) {
                report.kinks += 1;
            } else {
                report.failures += 1;
                if report.worst.is_none_or(|(_, _, wa, wn)| err > (wa - wn).abs()) {
                    report.worst = Some((i, idx, a, numeric));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_composite_passes() {
        let a = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.7).sin()).collect());
        let b = Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.3).cos()).collect());
        let r = check(
            &[a, b],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let s = g.softmax_rows(y)?;
                let m = g.mul(s, s)?;
                g.sum(m)
            },
            100,
            0,
            Tolerance::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 20);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // x * detach(x): the tape sees x, the true derivative is 2x
        let r = check(
            &[Tensor::scalar(1.5)],
            |g, v| {
                let c = g.constant(g.value(v[0]).clone())?;
                let y = g.mul(v[0], c)?;
                g.sum(y)
            },
            10,
            0,
            Tolerance::default(),
        )
        .unwrap();
        assert_eq!((r.failures, r.kinks), (1, 0));
    }

    #[test]
    fn kink_inside_the_step_is_told_apart() {
        // relu at exactly zero: the central difference is 0.5, the left difference matches the tape's 0
        let r = check(
            &[Tensor::scalar(0.0)],
            |g, v| {
                let y = g.relu(v[0])?;
                g.sum(y)
            },
            10,
            0,
            Tolerance::default(),
        )
        .unwrap();
        assert_eq!((r.failures, r.kinks), (0, 1));
        assert!(r.passed());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        assert!(check(&[Tensor::zeros(2, 2)], |_, v| Ok(v[0]), 4, 0, Tolerance::default()).is_err());
    }
}
