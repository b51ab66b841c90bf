//! Central finite-difference oracle for graph-built scalar functions.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Builds a scalar from an input node on the given graph.
pub trait ScalarFn: Fn(&mut Graph, NodeId) -> Result<NodeId> {}
impl<F: Fn(&mut Graph, NodeId) -> Result<NodeId>> ScalarFn for F {}

fn eval(f: &impl ScalarFn, x: Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let input = g.constant(x);
    let out = f(&mut g, input)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Graph(format!(
            "function output has shape {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("finite-difference probe".into()));
    }
    Ok(v)
}

/// Reverse-mode gradient of `f` at `x`.
pub fn analytic_grad(f: &impl ScalarFn, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let input = g.param(x.clone());
    let out = f(&mut g, input)?;
    let mut grads = g.backward(out)?;
    grads
        .take(input)
        .ok_or_else(|| Error::Graph("input gradient missing".into()))
}

/// Central-difference derivative along coordinate `i`.
pub fn numeric_partial(f: &impl ScalarFn, x: &Tensor, i: usize, step: f64) -> Result<f64> {
    let mut plus = x.clone();
    plus.data_mut()[i] += step;
    let mut minus = x.clone();
    minus.data_mut()[i] -= step;
    Ok((eval(f, plus)? - eval(f, minus)?) / (2.0 * step))
}

/// Max over probed coordinates of `|analytic - numeric| / max(1, |numeric|)`.
///
/// Probes every coordinate when `coords` is `None`.
pub fn finite_diff_check_coords(
    f: &impl ScalarFn,
    x: &Tensor,
    step: f64,
    coords: Option<&[usize]>,
) -> Result<f64> {
    let analytic = analytic_grad(f, x)?;
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let num = numeric_partial(f, x, i, step)?;
        let err = (analytic.data()[i] - num).abs() / num.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn finite_diff_check(f: &impl ScalarFn, x: &Tensor, step: f64) -> Result<f64> {
    finite_diff_check_coords(f, x, step, None)
}
