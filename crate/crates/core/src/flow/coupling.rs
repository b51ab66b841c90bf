use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::flow::spline::{RqsOp, SplineConfig};
use crate::rng::Prng;
use crate::tensor::Tensor;

fn uniform_matrix(rng: &mut Prng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("matrix shape")
}

/// Residual MLP: input projection, `blocks` residual blocks of two ReLU
/// linear layers with an additive skip, and an output projection that
/// starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNet {
    pub in_features: usize,
    pub hidden: usize,
    pub out_features: usize,
    pub blocks: usize,
    /// `[w_in, b_in, (w1, b1, w2, b2) * blocks, w_out, b_out]`
    pub tensors: Vec<Tensor>,
}

impl ResidualNet {
    pub fn new(
        in_features: usize,
        hidden: usize,
        out_features: usize,
        blocks: usize,
        rng: &mut Prng,
    ) -> Self {
        let mut tensors = vec![
            uniform_matrix(rng, in_features, hidden),
            Tensor::zeros(&[hidden]),
        ];
        for _ in 0..blocks {
            tensors.push(uniform_matrix(rng, hidden, hidden));
            tensors.push(Tensor::zeros(&[hidden]));
            tensors.push(uniform_matrix(rng, hidden, hidden));
            tensors.push(Tensor::zeros(&[hidden]));
        }
        tensors.push(Tensor::zeros(&[hidden, out_features]));
        tensors.push(Tensor::zeros(&[out_features]));
        Self {
            in_features,
            hidden,
            out_features,
            blocks,
            tensors,
        }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let lin = |g: &mut Graph, h: NodeId, i: usize| -> Result<NodeId> {
            let y = g.matmul(h, ids[i])?;
            g.add_bcast(y, ids[i + 1])
        };
        let mut h = lin(g, x, 0)?;
        for b in 0..self.blocks {
            let base = 2 + 4 * b;
            let t = g.relu(h)?;
            let t = lin(g, t, base)?;
            let t = g.relu(t)?;
            let t = lin(g, t, base + 2)?;
            h = g.add(h, t)?;
        }
        lin(g, h, 2 + 4 * self.blocks)
    }
}

/// Coupling layer: coordinates in `identity` pass through unchanged and
/// condition the splines applied to the coordinates in `transformed`.
/// Both index sets are contiguous column ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    pub identity: (usize, usize),
    pub transformed: (usize, usize),
    pub spline: SplineConfig,
    pub conditioner: ResidualNet,
}

impl CouplingLayer {
    pub fn new(
        identity: (usize, usize),
        transformed: (usize, usize),
        hidden: usize,
        blocks: usize,
        spline: SplineConfig,
        rng: &mut Prng,
    ) -> Self {
        // An empty identity half feeds a constant zero column, which leaves
        // an unconditional (bias-driven) spline.
        let n_in = (identity.1 - identity.0).max(1);
        let n_out = (transformed.1 - transformed.0) * spline.params_per_dim();
        Self {
            identity,
            transformed,
            spline,
            conditioner: ResidualNet::new(n_in, hidden, n_out.max(1), blocks, rng),
        }
    }

    pub fn is_noop(&self) -> bool {
        self.transformed.0 == self.transformed.1
    }

    pub fn num_tensors(&self) -> usize {
        self.conditioner.tensors.len()
    }

    pub(crate) fn conditioner_input(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let n = g.shape(x)[0];
        if self.identity.0 == self.identity.1 {
            Ok(g.constant(Tensor::zeros(&[n, 1])))
        } else {
            g.slice(x, 1, self.identity.0, self.identity.1)
        }
    }

    /// Forward transform of `x (n, d)`; returns the output and the summed
    /// log-derivative per row `(n)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        x: NodeId,
    ) -> Result<(NodeId, Option<NodeId>)> {
        if self.is_noop() {
            return Ok((x, None));
        }
        let m = self.transformed.1 - self.transformed.0;
        let cond_in = self.conditioner_input(g, x)?;
        let params = self.conditioner.forward(g, ids, cond_in)?;
        let xt = g.slice(x, 1, self.transformed.0, self.transformed.1)?;
        let out = g.custom(
            Box::new(RqsOp {
                config: self.spline,
            }),
            &[xt, params],
        )?;
        let y = g.slice(out, 1, 0, m)?;
        let ld = g.slice(out, 1, m, 2 * m)?;
        let ld = g.sum_last(ld)?;

        let d = g.shape(x)[1];
        let mut parts = Vec::with_capacity(3);
        if self.transformed.0 > 0 {
            parts.push(g.slice(x, 1, 0, self.transformed.0)?);
        }
        parts.push(y);
        if self.transformed.1 < d {
            parts.push(g.slice(x, 1, self.transformed.1, d)?);
        }
        let z = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 1)?
        };
        Ok((z, Some(ld)))
    }
}
