//! Last Layer Empirical Bayes: a learnable distribution over the final
//! linear layer, trained by Monte Carlo expected log-likelihood.
//!
//! End-to-end mode trains the backbone, a base last layer and the sampler
//! jointly, with the effective last layer `base + draw`. Two-step mode
//! freezes a maximum-likelihood backbone, discards its last layer and uses
//! the draw directly (the stored base is zero).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, NeuralSplineFlow};
use crate::metrics::{PosteriorSamples, SampleGroup};
use crate::nets::{
    clip_grad_norm, cross_entropy, epoch_batches, extract_features, features, head_from_flat,
    AdamState, Architecture, ClassifierParams, TrainConfig,
};
use crate::rng::{self, streams, Prng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    EndToEnd,
    TwoStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    SplineFlow,
    FcGenerator,
}

/// Plain ReLU MLP `z -> theta` of the same dimension. It has no density.
#[derive(Clone, Debug, PartialEq)]
pub struct FcGenerator {
    pub dim: usize,
    pub hidden: usize,
    /// `[w1, b1, w2, b2, w3, b3]`
    pub tensors: Vec<Tensor>,
}

impl FcGenerator {
    pub fn new(dim: usize, hidden: usize, rng: &mut Prng) -> Self {
        let mut tensors = Vec::with_capacity(6);
        for (i, o) in [(dim, hidden), (hidden, hidden), (hidden, dim)] {
            let bound = 1.0 / (i as f64).sqrt();
            let w = (0..i * o)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            tensors.push(Tensor::new(vec![i, o], w).expect("generator shape"));
            tensors.push(Tensor::zeros(&[o]));
        }
        Self {
            dim,
            hidden,
            tensors,
        }
    }

    pub fn forward_graph(&self, g: &mut Graph, ids: &[NodeId], z: NodeId) -> Result<NodeId> {
        let mut h = z;
        for l in 0..3 {
            h = g.matmul(h, ids[2 * l])?;
            h = g.add_bcast(h, ids[2 * l + 1])?;
            if l < 2 {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sampler {
    Flow(NeuralSplineFlow),
    Fc(FcGenerator),
}

impl Sampler {
    pub fn new(kind: SamplerKind, dim: usize, cfg: &FlowConfig, rng: &mut Prng) -> Result<Self> {
        Ok(match kind {
            SamplerKind::SplineFlow => Sampler::Flow(NeuralSplineFlow::new(dim, cfg, rng)?),
            SamplerKind::FcGenerator => {
                cfg.validate()?;
                Sampler::Fc(FcGenerator::new(dim, cfg.hidden_features, rng))
            }
        })
    }

    pub fn kind(&self) -> SamplerKind {
        match self {
            Sampler::Flow(_) => SamplerKind::SplineFlow,
            Sampler::Fc(_) => SamplerKind::FcGenerator,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Sampler::Flow(f) => f.dim,
            Sampler::Fc(f) => f.dim,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Sampler::Flow(f) => f.tensors(),
            Sampler::Fc(f) => f.tensors.iter().collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Sampler::Flow(f) => f.tensors_mut(),
            Sampler::Fc(f) => f.tensors.iter_mut().collect(),
        }
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

    /// Draws for the given base noise; the log-density is `None` for the
    /// fully-connected generator.
    pub fn draw_graph(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        z: &Tensor,
    ) -> Result<(NodeId, Option<NodeId>)> {
        match self {
            Sampler::Flow(f) => {
                let d = f.sample_graph(g, ids, z)?;
                Ok((d.theta, Some(d.log_q)))
            }
            Sampler::Fc(f) => {
                let zn = g.constant(z.clone());
                Ok((f.forward_graph(g, ids, zn)?, None))
            }
        }
    }

    /// `n` draws as plain rows.
    pub fn sample(&self, n: usize, rng: &mut Prng) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "sample count must be positive".into(),
            ));
        }
        let z = Tensor::new(vec![n, self.dim()], rng::normal_vec(rng, n * self.dim()))?;
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let (theta, _) = self.draw_graph(&mut g, &ids, &z)?;
        Ok(g.value(theta).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LLEBModel {
    pub mode: Mode,
    /// Backbone plus base last layer. The base is zero in two-step mode.
    pub params: ClassifierParams,
    pub sampler: Sampler,
}

impl LLEBModel {
    pub fn end_to_end(
        arch: &Architecture,
        kind: SamplerKind,
        flow: &FlowConfig,
        seed: u64,
    ) -> Result<Self> {
        let params = ClassifierParams::init(arch, &mut rng::stream(seed, streams::INIT))?;
        let sampler = Sampler::new(
            kind,
            params.split_dim(),
            flow,
            &mut rng::stream(seed, streams::FLOW_NOISE),
        )?;
        Ok(Self {
            mode: Mode::EndToEnd,
            params,
            sampler,
        })
    }

    /// Wraps a pretrained classifier, discarding its last layer.
    pub fn two_step(
        pretrained: &ClassifierParams,
        kind: SamplerKind,
        flow: &FlowConfig,
        seed: u64,
    ) -> Result<Self> {
        let d = pretrained.split_dim();
        let params = pretrained.with_head(&vec![0.0; d])?;
        let sampler = Sampler::new(kind, d, flow, &mut rng::stream(seed, streams::FLOW_NOISE))?;
        Ok(Self {
            mode: Mode::TwoStep,
            params,
            sampler,
        })
    }

    pub fn base_head(&self) -> Vec<f64> {
        self.params.head_flat()
    }

    /// Effective last layers for `n` fresh draws.
    pub fn sample_heads(&self, n: usize, rng: &mut Prng) -> Result<Vec<Vec<f64>>> {
        let draws = self.sampler.sample(n, rng)?;
        let base = self.base_head();
        Ok((0..n)
            .map(|i| draws.row(i).iter().zip(&base).map(|(e, b)| b + e).collect())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationConfig {
    pub lambda: f64,
    pub entropy_samples: usize,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            entropy_samples: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlebConfig {
    pub train: TrainConfig,
    /// Draws from the sampler per gradient step.
    pub samples: usize,
}

impl Default for LlebConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            samples: 10,
        }
    }
}

impl LlebConfig {
    /// Flow stage of two-step training: lr 1e-5, 100 epochs.
    pub fn two_step_default() -> Self {
        Self {
            train: TrainConfig {
                lr: 1e-5,
                ..TrainConfig::default()
            },
            samples: 10,
        }
    }
}

/// `(1/S) sum_s mean_i log p(y_i | x_i, base + theta_s)` on a graph.
///
/// `feats` is `(B, h)`, `theta` is `(S, d)` and `base` is `(d)` when given.
pub fn mc_loglik_graph(
    g: &mut Graph,
    arch: &Architecture,
    feats: NodeId,
    labels: &[usize],
    base: Option<NodeId>,
    theta: NodeId,
) -> Result<NodeId> {
    let s = g.shape(theta)[0];
    let mut total: Option<NodeId> = None;
    for k in 0..s {
        let mut row = g.slice(theta, 0, k, k + 1)?;
        if let Some(b) = base {
            row = g.add_bcast(row, b)?;
        }
        let logits = head_from_flat(g, arch, feats, row)?;
        let ce = cross_entropy(g, logits, labels)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("need at least one sample".into()))?;
    g.scale(total, -1.0 / s as f64)
}

/// Monte Carlo expected log-likelihood of a batch, dropout inactive.
pub fn mc_expected_loglik(
    model: &LLEBModel,
    x: &Tensor,
    labels: &[usize],
    samples: usize,
    rng: &mut Prng,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let feats = extract_features(&model.params, x)?;
    let z = Tensor::new(
        vec![samples, model.sampler.dim()],
        rng::normal_vec(rng, samples * model.sampler.dim()),
    )?;
    let (v, _) = objective_at_noise(model, &feats, labels, &z)?;
    Ok(v)
}

/// Objective and sampler-parameter gradients for fixed features and base
/// noise `z (S, d)`.
pub fn objective_at_noise(
    model: &LLEBModel,
    feats: &Tensor,
    labels: &[usize],
    z: &Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let ids = model.sampler.bind(&mut g, true);
    let (theta, _) = model.sampler.draw_graph(&mut g, &ids, z)?;
    let f = g.constant(feats.clone());
    let base = g.constant(Tensor::vector(model.base_head()));
    let obj = mc_loglik_graph(&mut g, &model.params.arch, f, labels, Some(base), theta)?;
    let v = g.value(obj).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("expected log-likelihood".into()));
    }
    let grads = g.backward(obj)?.collect(&ids)?;
    Ok((v, grads))
}

/// Expected log-likelihood on training data plus `lambda * H(q)`.
///
/// Returns the per-epoch mean of the negated objective. With `lambda == 0`
/// no entropy draws are made, so the trajectory matches the plain trainer
/// exactly. Requesting `lambda != 0` with the fully-connected generator is a
/// configuration error since it has no density.
pub fn train_regularized(
    model: &mut LLEBModel,
    data: &Dataset,
    cfg: &LlebConfig,
    reg: &RegularizationConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.train.validate()?;
    if cfg.samples == 0 {
        return Err(Error::Config("samples must be positive".into()));
    }
    if !reg.lambda.is_finite() {
        return Err(Error::Config("lambda must be finite".into()));
    }
    if reg.lambda != 0.0 {
        if model.sampler.kind() == SamplerKind::FcGenerator {
            return Err(Error::Config(
                "entropy regularization needs a density; the fully-connected generator has none"
                    .into(),
            ));
        }
        if reg.entropy_samples == 0 {
            return Err(Error::Config("entropy_samples must be positive".into()));
        }
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if model.sampler.dim() != model.params.split_dim() {
        return Err(Error::Shape(
            "sampler dimension does not match the last layer".into(),
        ));
    }

    let hp = &cfg.train;
    let d = model.sampler.dim();
    let mut shuffle = rng::stream(seed, streams::SHUFFLE);
    let mut drop_rng = rng::stream(seed, streams::DROPOUT);
    let mut noise = rng::stream(seed, streams::FLOW_NOISE);
    let mut ent_noise = rng::stream(seed, streams::ENTROPY_NOISE);
    let mut adam = AdamState::new(hp.lr, hp.weight_decay);

    // The frozen backbone is deterministic, so its features are computed once.
    let frozen = match model.mode {
        Mode::TwoStep => {
            let all: Vec<usize> = (0..data.len()).collect();
            let mut rows = Vec::with_capacity(data.len() * model.params.arch.penultimate_dim());
            for chunk in all.chunks(1000) {
                rows.extend_from_slice(extract_features(&model.params, &data.batch(chunk))?.data());
            }
            Some(Tensor::new(
                vec![data.len(), model.params.arch.penultimate_dim()],
                rows,
            )?)
        }
        Mode::EndToEnd => None,
    };

    let mut initial: Option<f64> = None;
    let mut trace = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        let mut total = 0.0;
        for batch in epoch_batches(&mut shuffle, data.len(), hp.batch_size) {
            let labels = data.batch_labels(&batch);
            let mut g = Graph::new();
            let flow_ids = model.sampler.bind(&mut g, true);
            let (feats, net_ids) = match &frozen {
                Some(all) => {
                    let h = all.row_len();
                    let mut rows = Vec::with_capacity(batch.len() * h);
                    batch
                        .iter()
                        .for_each(|&i| rows.extend_from_slice(all.row(i)));
                    (
                        g.constant(Tensor::new(vec![batch.len(), h], rows)?),
                        Vec::new(),
                    )
                }
                None => {
                    let ids = model.params.bind(&mut g, true);
                    let x = g.constant(data.batch(&batch));
                    let f = features(&mut g, &model.params.arch, &ids, x, Some(&mut drop_rng))?;
                    (f, ids)
                }
            };
            let base = match model.mode {
                Mode::EndToEnd => {
                    let n = net_ids.len();
                    let w = g.reshape(net_ids[n - 2], &[d - model.params.arch.num_classes()])?;
                    Some(g.concat(&[w, net_ids[n - 1]], 0)?)
                }
                Mode::TwoStep => None,
            };
            let z = Tensor::new(
                vec![cfg.samples, d],
                rng::normal_vec(&mut noise, cfg.samples * d),
            )?;
            let (theta, _) = model.sampler.draw_graph(&mut g, &flow_ids, &z)?;
            let mut obj = mc_loglik_graph(&mut g, &model.params.arch, feats, &labels, base, theta)?;
            if reg.lambda != 0.0 {
                let ze = Tensor::new(
                    vec![reg.entropy_samples, d],
                    rng::normal_vec(&mut ent_noise, reg.entropy_samples * d),
                )?;
                let (_, log_q) = model.sampler.draw_graph(&mut g, &flow_ids, &ze)?;
                let log_q = log_q.expect("flow sampler has a density");
                let neg_h = g.mean(log_q)?;
                let term = g.scale(neg_h, -reg.lambda)?;
                obj = g.add(obj, term)?;
            }
            let loss = g.neg(obj)?;
            let lv = g.value(loss).item();
            let start = *initial.get_or_insert(lv);
            if !lv.is_finite() || lv > start + 10.0 * start.abs().max(1.0) {
                return Err(Error::Divergence(format!(
                    "objective {lv} at epoch {epoch} (initial {start})"
                )));
            }
            total += lv * batch.len() as f64;

            let mut grads = g.backward(loss)?;
            let mut all = grads.collect(&flow_ids)?;
            all.extend(grads.collect(&net_ids)?);
            clip_grad_norm(&mut all, hp.clip_norm);
            let mut refs = model.sampler.tensors_mut();
            if model.mode == Mode::EndToEnd {
                refs.extend(model.params.tensors.iter_mut());
            }
            adam.step(&mut refs, &all)?;
        }
        trace.push(total / data.len() as f64);
    }
    Ok(trace)
}

/// Joint training of backbone, base last layer and spline flow.
pub fn train_end_to_end(
    arch: &Architecture,
    data: &Dataset,
    flow: &FlowConfig,
    cfg: &LlebConfig,
    seed: u64,
) -> Result<(LLEBModel, Vec<f64>)> {
    let mut model = LLEBModel::end_to_end(arch, SamplerKind::SplineFlow, flow, seed)?;
    let trace = train_regularized(
        &mut model,
        data,
        cfg,
        &RegularizationConfig::default(),
        seed,
    )?;
    Ok((model, trace))
}

/// Flow training over the last layer of a frozen pretrained classifier.
pub fn train_two_step(
    pretrained: &ClassifierParams,
    data: &Dataset,
    flow: &FlowConfig,
    cfg: &LlebConfig,
    seed: u64,
) -> Result<(LLEBModel, Vec<f64>)> {
    let mut model = LLEBModel::two_step(pretrained, SamplerKind::SplineFlow, flow, seed)?;
    let trace = train_regularized(
        &mut model,
        data,
        cfg,
        &RegularizationConfig::default(),
        seed,
    )?;
    Ok((model, trace))
}

/// `n` draws from `delta(backbone) x q`.
pub fn sample_posterior(model: &LLEBModel, n: usize, rng: &mut Prng) -> Result<PosteriorSamples> {
    PosteriorSamples::new(vec![SampleGroup::Heads {
        params: model.params.clone(),
        heads: model.sample_heads(n, rng)?,
    }])
}
