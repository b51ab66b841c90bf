use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::arch::Architecture;
use crate::nets::model::{cross_entropy, logits, ClassifierParams};
use crate::nets::optim::{clip_grad_norm, AdamState};
use crate::rng::{self, streams, Prng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    /// MNIST classifier defaults with batch size 256.
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch_size: 256,
            weight_decay: 1e-5,
            clip_norm: 0.1,
        }
    }
}

impl TrainConfig {
    /// MNIST profile with the 10^4 batch size instead of 256.
    pub fn mnist_large_batch() -> Self {
        Self {
            batch_size: 10_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "need lr >= 0, clip_norm > 0, weight_decay >= 0 (got {}, {}, {})",
                self.lr, self.clip_norm, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Shuffled index batches covering `0..n` once.
pub fn epoch_batches(rng: &mut Prng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    rng::permutation(rng, n)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Maximum-likelihood training with Adam and global-norm clipping.
///
/// Deterministic given `seed`. Returns the final parameters and the mean
/// training loss of every epoch.
pub fn train_classifier(
    arch: &Architecture,
    data: &Dataset,
    hp: &TrainConfig,
    seed: u64,
) -> Result<(ClassifierParams, Vec<f64>)> {
    hp.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut params = ClassifierParams::init(arch, &mut rng::stream(seed, streams::INIT))?;
    let trace = fit_classifier(&mut params, data, hp, seed)?;
    Ok((params, trace))
}

/// Continues maximum-likelihood training from `params`.
pub fn fit_classifier(
    params: &mut ClassifierParams,
    data: &Dataset,
    hp: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut shuffle = rng::stream(seed, streams::SHUFFLE);
    let mut drop_rng = rng::stream(seed, streams::DROPOUT);
    let mut adam = AdamState::new(hp.lr, hp.weight_decay);
    let mut trace = Vec::with_capacity(hp.epochs);

    for epoch in 0..hp.epochs {
        let mut total = 0.0;
        for batch in epoch_batches(&mut shuffle, data.len(), hp.batch_size) {
            let mut g = Graph::new();
            let ids = params.bind(&mut g, true);
            let x = g.constant(data.batch(&batch));
            let out = logits(&mut g, &params.arch, &ids, x, Some(&mut drop_rng))?;
            let loss = cross_entropy(&mut g, out, &data.batch_labels(&batch))?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            total += lv * batch.len() as f64;
            let mut grads = g.backward(loss)?.collect(&ids)?;
            clip_grad_norm(&mut grads, hp.clip_norm);
            let mut refs: Vec<_> = params.tensors.iter_mut().collect();
            adam.step(&mut refs, &grads)?;
        }
        trace.push(total / data.len() as f64);
    }
    Ok(trace)
}
