//! Neural spline flow: standard Gaussian base, rational-quadratic coupling
//! layers with complementary contiguous masks.
//!
//! Layer `2i` transforms the second half of the coordinates conditioned on
//! the first `ceil(d / 2)`; layer `2i + 1` swaps the roles. The output
//! projection of every conditioner starts at zero, so a fresh flow is the
//! identity map and its density is the base density.

pub mod coupling;
pub mod spline;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;

pub use coupling::{CouplingLayer, ResidualNet};
pub use spline::{rqs_forward, rqs_inverse, RQSpline, RqsOp, SplineConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub hidden_features: usize,
    pub coupling_layers: usize,
    pub residual_blocks: usize,
    pub bins: usize,
    pub tail_bound: f64,
    pub min_bin_width: f64,
    pub min_bin_height: f64,
    pub min_derivative: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let s = SplineConfig::default();
        Self {
            hidden_features: 100,
            coupling_layers: 2,
            residual_blocks: 2,
            bins: s.bins,
            tail_bound: s.tail_bound,
            min_bin_width: s.min_bin_width,
            min_bin_height: s.min_bin_height,
            min_derivative: s.min_derivative,
        }
    }
}

impl FlowConfig {
    pub fn spline(&self) -> SplineConfig {
        SplineConfig {
            bins: self.bins,
            tail_bound: self.tail_bound,
            min_bin_width: self.min_bin_width,
            min_bin_height: self.min_bin_height,
            min_derivative: self.min_derivative,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_features == 0 || self.coupling_layers == 0 {
            return Err(Error::Config(
                "flow needs hidden_features > 0 and coupling_layers > 0".into(),
            ));
        }
        self.spline().validate()
    }
}

/// `log N(z; 0, I)` per row.
pub fn standard_normal_log_prob(z: &Tensor) -> Vec<f64> {
    let d = z.row_len() as f64;
    (0..z.rows())
        .map(|i| -0.5 * z.row(i).iter().map(|v| v * v).sum::<f64>() - 0.5 * d * (2.0 * PI).ln())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralSplineFlow {
    pub dim: usize,
    pub config: FlowConfig,
    pub layers: Vec<CouplingLayer>,
}

/// Graph handles produced by [`NeuralSplineFlow::sample_graph`].
#[derive(Clone, Copy, Debug)]
pub struct FlowDraw {
    /// `(n, d)` samples.
    pub theta: NodeId,
    /// `(n)` log-density of each sample.
    pub log_q: NodeId,
    /// `(n)` summed forward log-derivative of each sample.
    pub log_det: NodeId,
}

impl NeuralSplineFlow {
    pub fn new(dim: usize, config: &FlowConfig, rng: &mut Prng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "flow dimension must be positive".into(),
            ));
        }
        config.validate()?;
        let half = dim.div_ceil(2);
        let layers = (0..config.coupling_layers)
            .map(|i| {
                let (id, tr) = if i % 2 == 0 {
                    ((0, half), (half, dim))
                } else {
                    ((half, dim), (0, half))
                };
                CouplingLayer::new(
                    id,
                    tr,
                    config.hidden_features,
                    config.residual_blocks,
                    config.spline(),
                    rng,
                )
            })
            .collect();
        Ok(Self {
            dim,
            config: config.clone(),
            layers,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.conditioner.tensors.iter())
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.conditioner.tensors.iter_mut())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Adds `scale * N(0, 1)` noise to every parameter, including the zero
    /// output projections. Used to get non-trivial flows in tests.
    pub fn perturb(&mut self, rng: &mut Prng, scale: f64) {
        for t in self.tensors_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += scale * rng::normal(rng));
        }
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        if x.len() != 2 || x[1] != self.dim {
            return Err(Error::Shape(format!(
                "flow of dim {} got input {x:?}",
                self.dim
            )));
        }
        Ok(())
    }

    /// Pushes base noise through all layers; returns `(theta, log_det)`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        z: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        self.check_input(g.shape(z))?;
        let n = g.shape(z)[0];
        let mut x = z;
        let mut total: Option<NodeId> = None;
        let mut off = 0;
        for layer in &self.layers {
            let k = layer.num_tensors();
            let (y, ld) = layer.forward(g, &ids[off..off + k], x)?;
            off += k;
            x = y;
            if let Some(ld) = ld {
                total = Some(match total {
                    Some(t) => g.add(t, ld)?,
                    None => ld,
                });
            }
        }
        let total = match total {
            Some(t) => t,
            None => g.constant(Tensor::zeros(&[n])),
        };
        Ok((x, total))
    }

    /// Reparameterized draw `theta = f(z)` recorded on `g`.
    pub fn sample_graph(&self, g: &mut Graph, ids: &[NodeId], z: &Tensor) -> Result<FlowDraw> {
        let base = g.constant(Tensor::vector(standard_normal_log_prob(z)));
        let zn = g.constant(z.clone());
        let (theta, log_det) = self.forward_graph(g, ids, zn)?;
        let log_q = g.sub(base, log_det)?;
        Ok(FlowDraw {
            theta,
            log_q,
            log_det,
        })
    }

    /// `(theta, log q(theta))` for given base noise.
    pub fn transform(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let draw = self.sample_graph(&mut g, &ids, z)?;
        Ok((
            g.value(draw.theta).clone(),
            g.value(draw.log_q).data().to_vec(),
        ))
    }

    pub fn sample(&self, n: usize, rng: &mut Prng) -> Result<(Tensor, Vec<f64>)> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "sample count must be positive".into(),
            ));
        }
        let z = Tensor::new(vec![n, self.dim], rng::normal_vec(rng, n * self.dim))?;
        self.transform(&z)
    }

    /// Maps samples back to base space; returns `(z, log_det of the inverse)`.
    pub fn inverse(&self, theta: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_input(theta.shape())?;
        let n = theta.rows();
        let mut x = theta.clone();
        let mut log_det = vec![0.0; n];
        for layer in self.layers.iter().rev() {
            if layer.is_noop() {
                continue;
            }
            let params = {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = layer
                    .conditioner
                    .tensors
                    .iter()
                    .map(|t| g.constant(t.clone()))
                    .collect();
                let xin = g.constant(x.clone());
                let cond_in = layer.conditioner_input(&mut g, xin)?;
                let out = layer.conditioner.forward(&mut g, &ids, cond_in)?;
                g.value(out).clone()
            };
            let p = layer.spline.params_per_dim();
            let (a, b) = layer.transformed;
            let d = self.dim;
            let xd = x.data_mut();
            for r in 0..n {
                let pr = params.row(r);
                for (j, col) in (a..b).enumerate() {
                    let (v, ld) =
                        rqs_inverse(xd[r * d + col], &pr[j * p..(j + 1) * p], &layer.spline);
                    xd[r * d + col] = v;
                    log_det[r] += ld;
                }
            }
        }
        Ok((x, log_det))
    }

    /// `log q(theta)` by change of variables through the inverse.
    pub fn log_prob(&self, theta: &Tensor) -> Result<Vec<f64>> {
        let (z, ld) = self.inverse(theta)?;
        Ok(standard_normal_log_prob(&z)
            .into_iter()
            .zip(ld)
            .map(|(b, l)| b + l)
            .collect())
    }

    /// Monte Carlo entropy `-mean log q` over `n` fresh samples.
    pub fn entropy_estimate(&self, n: usize, rng: &mut Prng) -> Result<f64> {
        let (_, log_q) = self.sample(n, rng)?;
        Ok(-log_q.iter().sum::<f64>() / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> FlowConfig {
        FlowConfig {
            hidden_features: 16,
            ..FlowConfig::default()
        }
    }

    #[test]
    fn identity_flow_at_origin() {
        let f = NeuralSplineFlow::new(2, &FlowConfig::default(), &mut rng::seeded(0)).unwrap();
        let lp = f.log_prob(&Tensor::zeros(&[1, 2])).unwrap();
        assert!((lp[0] + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((lp[0] + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn identity_flow_matches_gaussian() {
        let f = NeuralSplineFlow::new(3, &small_cfg(), &mut rng::seeded(0)).unwrap();
        let theta = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.5, 11.0, 0.0, -4.0]).unwrap();
        let lp = f.log_prob(&theta).unwrap();
        let expected = standard_normal_log_prob(&theta);
        for (a, b) in lp.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_log_q_is_self_consistent() {
        let mut f = NeuralSplineFlow::new(5, &small_cfg(), &mut rng::seeded(1)).unwrap();
        f.perturb(&mut rng::seeded(2), 0.1);
        let (theta, log_q) = f.sample(64, &mut rng::seeded(3)).unwrap();
        let lp = f.log_prob(&theta).unwrap();
        let worst = log_q
            .iter()
            .zip(&lp)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
        let (again, _) = f.sample(64, &mut rng::seeded(3)).unwrap();
        assert_eq!(theta, again);
    }

    #[test]
    fn single_entropy_sample() {
        let f = NeuralSplineFlow::new(2, &small_cfg(), &mut rng::seeded(1)).unwrap();
        let (_, log_q) = f.sample(1, &mut rng::seeded(9)).unwrap();
        let h = f.entropy_estimate(1, &mut rng::seeded(9)).unwrap();
        assert_eq!(h, -log_q[0]);
    }

    #[test]
    fn odd_dimension_masks() {
        let f = NeuralSplineFlow::new(5, &small_cfg(), &mut rng::seeded(0)).unwrap();
        assert_eq!(f.layers[0].identity, (0, 3));
        assert_eq!(f.layers[0].transformed, (3, 5));
        assert_eq!(f.layers[1].identity, (3, 5));
        assert_eq!(f.layers[1].transformed, (0, 3));
        let p = f.config.spline().params_per_dim();
        assert_eq!(f.layers[0].conditioner.out_features, 2 * p);
    }
}
