use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nets::arch::{Architecture, Layer};
use crate::rng::Prng;
use crate::tensor::Tensor;

/// All classifier parameters in layer order (weight, bias per parametric
/// layer). The last two tensors are the final linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub arch: Architecture,
    pub tensors: Vec<Tensor>,
}

impl ClassifierParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(arch: &Architecture, rng: &mut Prng) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("init shape")
                }
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .param_shapes()
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn from_tensors(arch: &Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| s != t.shape())
        {
            return Err(Error::Shape(
                "parameter tensors do not match architecture".into(),
            ));
        }
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn split_dim(&self) -> usize {
        self.arch.split_dim()
    }

    /// Everything before the final linear layer.
    pub fn backbone(&self) -> &[Tensor] {
        &self.tensors[..self.tensors.len() - 2]
    }

    /// Final layer flattened as weight `(in, out)` row-major, then bias.
    pub fn head_flat(&self) -> Vec<f64> {
        let n = self.tensors.len();
        let mut v = self.tensors[n - 2].data().to_vec();
        v.extend_from_slice(self.tensors[n - 1].data());
        v
    }

    pub fn set_head_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.split_dim() {
            return Err(Error::Shape(format!(
                "head vector has {} entries, expected {}",
                flat.len(),
                self.split_dim()
            )));
        }
        let n = self.tensors.len();
        let w = self.tensors[n - 2].numel();
        self.tensors[n - 2].data_mut().copy_from_slice(&flat[..w]);
        self.tensors[n - 1].data_mut().copy_from_slice(&flat[w..]);
        Ok(())
    }

    pub fn with_head(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_head_flat(flat)?;
        Ok(p)
    }

    /// Full parameter vector: backbone tensors then the flattened head.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }
}

fn dropout_mask(rng: &mut Prng, rate: f64, n: usize) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

/// Runs every layer except the final linear one.
///
/// `x` has shape `(batch, input_shape...)`; returns `(batch, penultimate)`.
/// Dropout layers are active exactly when `dropout` is `Some`, using inverted
/// scaling so inactive evaluation needs no rescale.
pub fn features(
    g: &mut Graph,
    arch: &Architecture,
    params: &[NodeId],
    x: NodeId,
    mut dropout: Option<&mut Prng>,
) -> Result<NodeId> {
    let mut expected = vec![g.shape(x)[0]];
    expected.extend_from_slice(&arch.input_shape);
    if g.shape(x) != expected.as_slice() {
        return Err(Error::Shape(format!(
            "input {:?} does not match architecture input {:?}",
            g.shape(x),
            arch.input_shape
        )));
    }
    let batch = expected[0];
    let mut h = x;
    let mut p = 0;
    let body = &arch.layers[..arch.layers.len() - 1];
    for layer in body {
        h = match *layer {
            Layer::Conv2d {
                out_channels,
                kernel,
                ..
            } => {
                let s = g.shape(h).to_vec();
                let (oh, ow) = (s[1] - kernel + 1, s[2] - kernel + 1);
                let cols = g.im2col(h, kernel)?;
                let y = g.matmul(cols, params[p])?;
                let y = g.add_bcast(y, params[p + 1])?;
                p += 2;
                g.reshape(y, &[batch, oh, ow, out_channels])?
            }
            Layer::MaxPool2d { kernel, stride } => g.maxpool2d(h, kernel, stride)?,
            Layer::Relu => g.relu(h)?,
            Layer::Flatten => {
                let n = g.shape(h)[1..].iter().product();
                g.reshape(h, &[batch, n])?
            }
            Layer::Linear { .. } => {
                let y = g.matmul(h, params[p])?;
                p += 2;
                g.add_bcast(y, params[p - 1])?
            }
            Layer::Dropout { rate } => match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let shape = g.shape(h).to_vec();
                    let mask = dropout_mask(rng, rate, shape.iter().product());
                    let m = g.constant(Tensor::new(shape, mask)?);
                    g.mul(h, m)?
                }
                _ => h,
            },
            Layer::Dropout2d { rate } => match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let shape = g.shape(h).to_vec();
                    let (b, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
                    let per_channel = dropout_mask(rng, rate, b * c);
                    let mut mask = Vec::with_capacity(b * hw * c);
                    for n in 0..b {
                        for _ in 0..hw {
                            mask.extend_from_slice(&per_channel[n * c..(n + 1) * c]);
                        }
                    }
                    let m = g.constant(Tensor::new(shape, mask)?);
                    g.mul(h, m)?
                }
                _ => h,
            },
        };
    }
    Ok(h)
}

/// `features @ weight + bias`.
pub fn head(g: &mut Graph, feats: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let y = g.matmul(feats, weight)?;
    g.add_bcast(y, bias)
}

/// Applies a flattened head given as a `(1, split_dim)` or `(split_dim)` node.
pub fn head_from_flat(
    g: &mut Graph,
    arch: &Architecture,
    feats: NodeId,
    flat: NodeId,
) -> Result<NodeId> {
    let (h, c) = (arch.penultimate_dim(), arch.num_classes());
    let n = g.value(flat).numel();
    if n != h * c + c {
        return Err(Error::Shape(format!(
            "head vector of {n} entries, expected {}",
            h * c + c
        )));
    }
    let flat = g.reshape(flat, &[1, n])?;
    let w = g.slice(flat, 1, 0, h * c)?;
    let w = g.reshape(w, &[h, c])?;
    let b = g.slice(flat, 1, h * c, n)?;
    let b = g.reshape(b, &[c])?;
    head(g, feats, w, b)
}

/// Full forward pass on a graph.
pub fn logits(
    g: &mut Graph,
    arch: &Architecture,
    params: &[NodeId],
    x: NodeId,
    dropout: Option<&mut Prng>,
) -> Result<NodeId> {
    let f = features(g, arch, params, x, dropout)?;
    let n = params.len();
    head(g, f, params[n - 2], params[n - 1])
}

/// Logits as a plain tensor. Dropout is active exactly when `rng` is given.
pub fn net_forward(
    params: &ClassifierParams,
    x: &Tensor,
    rng: Option<&mut Prng>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = params.bind(&mut g, false);
    let xin = g.constant(x.clone());
    let out = logits(&mut g, &params.arch, &ids, xin, rng)?;
    Ok(g.value(out).clone())
}

/// Penultimate features as a plain tensor, dropout inactive.
pub fn extract_features(params: &ClassifierParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = params.bind(&mut g, false);
    let xin = g.constant(x.clone());
    let out = features(&mut g, &params.arch, &ids, xin, None)?;
    Ok(g.value(out).clone())
}

/// Mean over the batch of `logsumexp(logits) - logits[label]`.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {s:?} vs {} labels",
            labels.len()
        )));
    }
    let classes = s[1];
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    let lse = g.logsumexp(logits)?;
    let picked = g.pick(logits, labels)?;
    let nll = g.sub(lse, picked)?;
    g.mean(nll)
}

/// Row-wise softmax of a `(rows, classes)` tensor.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}
