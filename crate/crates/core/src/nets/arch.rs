use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Stride-1 unpadded square convolution on `(height, width, channels)`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// Zeroes whole channels.
    Dropout2d {
        rate: f64,
    },
    /// Zeroes individual units.
    Dropout {
        rate: f64,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl Layer {
    pub fn is_dropout(&self) -> bool {
        matches!(self, Layer::Dropout { .. } | Layer::Dropout2d { .. })
    }

    /// Parameter tensor shapes, weights first.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => vec![
                vec![kernel * kernel * in_channels, out_channels],
                vec![out_channels],
            ],
            Layer::Linear {
                in_features,
                out_features,
            } => vec![vec![in_features, out_features], vec![out_features]],
            _ => vec![],
        }
    }
}

/// Ordered layer list plus per-example input shape. The final layer must be
/// `Linear`; it is the block the uncertainty methods operate on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Architecture {
    /// The small MNIST convolutional classifier (28x28x1 input, 10 classes).
    ///
    /// The channel-dropout rate is not given with the layer list; 0.5 is the
    /// usual default for this layer type.
    pub fn mnist() -> Self {
        Self::mnist_with_dropout(0.5)
    }

    pub fn mnist_with_dropout(rate: f64) -> Self {
        Self {
            input_shape: vec![28, 28, 1],
            layers: vec![
                Layer::Conv2d {
                    in_channels: 1,
                    out_channels: 10,
                    kernel: 5,
                },
                Layer::MaxPool2d {
                    kernel: 2,
                    stride: 2,
                },
                Layer::Relu,
                Layer::Conv2d {
                    in_channels: 10,
                    out_channels: 20,
                    kernel: 5,
                },
                Layer::Dropout2d { rate },
                Layer::MaxPool2d {
                    kernel: 2,
                    stride: 2,
                },
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear {
                    in_features: 320,
                    out_features: 50,
                },
                Layer::Linear {
                    in_features: 50,
                    out_features: 10,
                },
            ],
        }
    }

    /// `2 -> hidden -> hidden -> 2` ReLU MLP with unit dropout before the head.
    pub fn two_moons_mlp(hidden: usize, dropout: f64) -> Self {
        Self {
            input_shape: vec![2],
            layers: vec![
                Layer::Linear {
                    in_features: 2,
                    out_features: hidden,
                },
                Layer::Relu,
                Layer::Linear {
                    in_features: hidden,
                    out_features: hidden,
                },
                Layer::Relu,
                Layer::Dropout { rate: dropout },
                Layer::Linear {
                    in_features: hidden,
                    out_features: 2,
                },
            ],
        }
    }

    /// Per-layer output shapes (excluding batch). Fails on any inconsistency.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad =
                |cur: &[usize]| Error::Shape(format!("layer {i} ({layer:?}) got input {cur:?}"));
            cur = match *layer {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => match cur.as_slice() {
                    &[h, w, c] if c == in_channels && h >= kernel && w >= kernel && kernel > 0 => {
                        vec![h - kernel + 1, w - kernel + 1, out_channels]
                    }
                    _ => return Err(bad(&cur)),
                },
                Layer::MaxPool2d { kernel, stride } => match cur.as_slice() {
                    &[h, w, c] if h >= kernel && w >= kernel && kernel > 0 && stride > 0 => {
                        vec![(h - kernel) / stride + 1, (w - kernel) / stride + 1, c]
                    }
                    _ => return Err(bad(&cur)),
                },
                Layer::Dropout2d { rate } => {
                    if cur.len() != 3 || !(0.0..1.0).contains(&rate) {
                        return Err(bad(&cur));
                    }
                    cur
                }
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(bad(&cur));
                    }
                    cur
                }
                Layer::Relu => cur,
                Layer::Flatten => vec![cur.iter().product()],
                Layer::Linear {
                    in_features,
                    out_features,
                } => match cur.as_slice() {
                    &[f] if f == in_features => vec![out_features],
                    _ => return Err(bad(&cur)),
                },
            };
            out.push(cur.clone());
        }
        match self.layers.last() {
            Some(Layer::Linear { .. }) => Ok(out),
            _ => Err(Error::Shape(
                "architecture must end with a linear layer".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    fn head(&self) -> (usize, usize) {
        match self.layers.last() {
            Some(&Layer::Linear {
                in_features,
                out_features,
            }) => (in_features, out_features),
            _ => panic!("architecture must end with a linear layer"),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head().1
    }

    /// Width of the features entering the final linear layer.
    pub fn penultimate_dim(&self) -> usize {
        self.head().0
    }

    /// Flattened size of the final layer's weights and bias.
    pub fn split_dim(&self) -> usize {
        let (i, o) = self.head();
        i * o + o
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(Layer::is_dropout)
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(Layer::param_shapes).collect()
    }
}
