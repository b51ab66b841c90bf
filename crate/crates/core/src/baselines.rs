//! Deep ensembles, Monte Carlo dropout and last-layer Laplace.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{PosteriorSamples, SampleGroup};
use crate::nets::{
    extract_features, softmax_rows, train_classifier, Architecture, ClassifierParams, TrainConfig,
};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<ClassifierParams>,
    pub seeds: Vec<u64>,
}

/// Member `m` is trained with seed `base_seed + m`.
pub fn train_ensemble(
    arch: &Architecture,
    data: &Dataset,
    hp: &TrainConfig,
    m: usize,
    base_seed: u64,
) -> Result<(EnsembleModel, Vec<Vec<f64>>)> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "ensemble needs at least one member".into(),
        ));
    }
    let mut members = Vec::with_capacity(m);
    let mut seeds = Vec::with_capacity(m);
    let mut traces = Vec::with_capacity(m);
    for k in 0..m as u64 {
        let seed = base_seed.wrapping_add(k);
        let (p, t) = train_classifier(arch, data, hp, seed)?;
        members.push(p);
        seeds.push(seed);
        traces.push(t);
    }
    Ok((EnsembleModel { members, seeds }, traces))
}

/// The mixture's support: one point mass per member, in member order.
pub fn ensemble_posterior_samples(ens: &EnsembleModel) -> Result<PosteriorSamples> {
    PosteriorSamples::concat(
        ens.members
            .iter()
            .map(PosteriorSamples::point_mass)
            .collect(),
    )
}

/// `passes` stochastic forward passes with dropout active.
pub fn mcd_posterior_samples(
    params: &ClassifierParams,
    passes: usize,
    seed: u64,
) -> Result<PosteriorSamples> {
    if !params.arch.has_dropout() {
        return Err(Error::InvalidArgument(
            "architecture has no dropout layer".into(),
        ));
    }
    if passes == 0 {
        return Err(Error::InvalidArgument("need at least one pass".into()));
    }
    PosteriorSamples::new(vec![SampleGroup::Dropout {
        params: params.clone(),
        passes,
        seed,
    }])
}

/// Gaussian over the last layer `N(map, (H + tau I)^-1)`.
#[derive(Clone, Debug)]
pub struct LaplacePosterior {
    pub params: ClassifierParams,
    pub tau: f64,
    /// `H + tau I`, ordered like [`ClassifierParams::head_flat`].
    pub precision: DMatrix<f64>,
    /// Lower Cholesky factor of `precision`.
    pub chol: DMatrix<f64>,
}

/// Generalized Gauss-Newton of the summed cross-entropy with respect to the
/// last layer, from penultimate features `(N, h)` stored row-major.
pub fn ggn(features: &[f64], h: usize, c: usize, head: &[f64]) -> DMatrix<f64> {
    let d = h * c + c;
    let mut out = DMatrix::zeros(d, d);
    let (w, b) = head.split_at(h * c);
    for f in features.chunks(h) {
        let logits: Vec<f64> = (0..c)
            .map(|k| b[k] + (0..h).map(|j| f[j] * w[j * c + k]).sum::<f64>())
            .collect();
        let p = &softmax_rows(&Tensor::new(vec![1, c], logits).expect("row"))[0];
        // phi is the feature vector augmented with 1 for the bias block.
        let phi = |j: usize| if j < h { f[j] } else { 1.0 };
        for j in 0..=h {
            let fj = phi(j);
            if fj == 0.0 {
                continue;
            }
            for k in 0..=h {
                let fjk = fj * phi(k);
                for a in 0..c {
                    let row = if j < h { j * c + a } else { h * c + a };
                    for bb in 0..c {
                        let col = if k < h { k * c + bb } else { h * c + bb };
                        let lam = if a == bb {
                            p[a] - p[a] * p[bb]
                        } else {
                            -p[a] * p[bb]
                        };
                        out[(row, col)] += fjk * lam;
                    }
                }
            }
        }
    }
    out
}

/// Laplace fit from precomputed features; an empty feature set gives the
/// prior-only precision `tau I`.
pub fn laplace_from_features(
    params: &ClassifierParams,
    features: &[f64],
    tau: f64,
) -> Result<LaplacePosterior> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "prior precision must be positive, got {tau}"
        )));
    }
    let h = params.arch.penultimate_dim();
    let c = params.arch.num_classes();
    if features.len() % h != 0 {
        return Err(Error::Shape(format!(
            "feature buffer of {} is not a multiple of {h}",
            features.len()
        )));
    }
    let mut precision = ggn(features, h, c, &params.head_flat());
    let d = precision.nrows();
    for i in 0..d {
        precision[(i, i)] += tau;
    }
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Cholesky(format!("precision not positive definite (tau = {tau})")))?
        .l();
    Ok(LaplacePosterior {
        params: params.clone(),
        tau,
        precision,
        chol,
    })
}

pub fn laplace_fit(
    params: &ClassifierParams,
    data: &Dataset,
    tau: f64,
) -> Result<LaplacePosterior> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut feats = Vec::with_capacity(data.len() * params.arch.penultimate_dim());
    for chunk in all.chunks(1000) {
        feats.extend_from_slice(extract_features(params, &data.batch(chunk))?.data());
    }
    laplace_from_features(params, &feats, tau)
}

impl LaplacePosterior {
    /// Rebuilds the posterior from a stored precision matrix.
    pub fn from_precision(
        params: &ClassifierParams,
        tau: f64,
        precision: DMatrix<f64>,
    ) -> Result<Self> {
        let d = params.split_dim();
        if precision.nrows() != d || precision.ncols() != d {
            return Err(Error::Shape(format!("precision must be {d}x{d}")));
        }
        let chol = precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Cholesky("stored precision not positive definite".into()))?
            .l();
        Ok(Self {
            params: params.clone(),
            tau,
            precision,
            chol,
        })
    }

    /// `map + L^-T z`.
    pub fn head_for_noise(&self, z: &[f64]) -> Vec<f64> {
        let z = DVector::from_column_slice(z);
        let eps = self
            .chol
            .transpose()
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        self.params
            .head_flat()
            .iter()
            .zip(eps.iter())
            .map(|(m, e)| m + e)
            .collect()
    }

    pub fn sample_heads(&self, n: usize, rng: &mut Prng) -> Vec<Vec<f64>> {
        let d = self.params.split_dim();
        (0..n)
            .map(|_| self.head_for_noise(&rng::normal_vec(rng, d)))
            .collect()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.precision
            .clone()
            .cholesky()
            .expect("precision was factorized at construction")
            .inverse()
    }
}

pub fn laplace_sample(
    post: &LaplacePosterior,
    n: usize,
    rng: &mut Prng,
) -> Result<PosteriorSamples> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample count must be positive".into(),
        ));
    }
    PosteriorSamples::new(vec![SampleGroup::Heads {
        params: post.params.clone(),
        heads: post.sample_heads(n, rng),
    }])
}
