//! Method-agnostic evaluation: predictive averaging, accuracy, calibration,
//! epistemic variance and in-vs-OOD AUROC.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{extract_features, net_forward, softmax_rows, ClassifierParams};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// Rows per forward pass when scoring a dataset.
const CHUNK: usize = 1000;

/// One source of posterior draws.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleGroup {
    /// Fixed backbone with one or more last layers (flattened as weight then
    /// bias). Covers point masses, flow draws and Laplace draws.
    Heads {
        params: ClassifierParams,
        heads: Vec<Vec<f64>>,
    },
    /// Stochastic forward passes with dropout active.
    Dropout {
        params: ClassifierParams,
        passes: usize,
        seed: u64,
    },
}

impl SampleGroup {
    pub fn len(&self) -> usize {
        match self {
            SampleGroup::Heads { heads, .. } => heads.len(),
            SampleGroup::Dropout { passes, .. } => *passes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn params(&self) -> &ClassifierParams {
        match self {
            SampleGroup::Heads { params, .. } | SampleGroup::Dropout { params, .. } => params,
        }
    }
}

/// Uniformly weighted draws from `q*`, pooled over groups.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSamples {
    pub groups: Vec<SampleGroup>,
}

impl PosteriorSamples {
    pub fn new(groups: Vec<SampleGroup>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(SampleGroup::is_empty) {
            return Err(Error::InvalidArgument(
                "posterior samples must be non-empty".into(),
            ));
        }
        let arch = &groups[0].params().arch;
        if groups.iter().any(|g| &g.params().arch != arch) {
            return Err(Error::Shape("posterior samples mix architectures".into()));
        }
        for g in &groups {
            if let SampleGroup::Heads { params, heads } = g {
                if heads.iter().any(|h| h.len() != params.split_dim()) {
                    return Err(Error::Shape(
                        "head vector length does not match architecture".into(),
                    ));
                }
            }
        }
        Ok(Self { groups })
    }

    /// A single deterministic model.
    pub fn point_mass(params: &ClassifierParams) -> Self {
        Self {
            groups: vec![SampleGroup::Heads {
                params: params.clone(),
                heads: vec![params.head_flat()],
            }],
        }
    }

    /// Pools several sample sets with uniform weight per row.
    pub fn concat(parts: Vec<PosteriorSamples>) -> Result<Self> {
        Self::new(parts.into_iter().flat_map(|p| p.groups).collect())
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(SampleGroup::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Full parameter vectors (backbone then head) for head-based groups;
    /// dropout groups have no fixed parameter vector and are skipped.
    pub fn full_vectors(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for g in &self.groups {
            if let SampleGroup::Heads { params, heads } = g {
                let backbone: Vec<f64> = params
                    .backbone()
                    .iter()
                    .flat_map(|t| t.data().iter().copied())
                    .collect();
                for h in heads {
                    let mut v = backbone.clone();
                    v.extend_from_slice(h);
                    out.push(v);
                }
            }
        }
        out
    }

    /// Class probabilities for every sample: `out[s]` is `(N, C)` for input `x`.
    pub fn prob_rows(&self, x: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(self.len());
        for g in &self.groups {
            match g {
                SampleGroup::Heads { params, heads } => {
                    let feats = extract_features(params, x)?;
                    let (h, c) = (params.arch.penultimate_dim(), params.arch.num_classes());
                    for head in heads {
                        out.push(apply_head(&feats, head, h, c));
                    }
                }
                SampleGroup::Dropout {
                    params,
                    passes,
                    seed,
                } => {
                    let mut drop = rng::stream(*seed, streams::DROPOUT);
                    for _ in 0..*passes {
                        out.push(softmax_rows(&net_forward(params, x, Some(&mut drop))?));
                    }
                }
            }
        }
        Ok(out)
    }

    /// [`prob_rows`](Self::prob_rows) over a whole dataset, processed in
    /// chunks. Dropout masks continue across chunks from one stream.
    pub fn dataset_probs(&self, data: &Dataset) -> Result<Vec<Vec<Vec<f64>>>> {
        let n = data.len();
        let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); self.len()];
        let mut s0 = 0;
        for g in &self.groups {
            match g {
                SampleGroup::Heads { params, heads } => {
                    let (h, c) = (params.arch.penultimate_dim(), params.arch.num_classes());
                    for start in (0..n).step_by(CHUNK) {
                        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
                        let feats = extract_features(params, &data.batch(&idx))?;
                        for (k, head) in heads.iter().enumerate() {
                            out[s0 + k].extend(apply_head(&feats, head, h, c));
                        }
                    }
                }
                SampleGroup::Dropout {
                    params,
                    passes,
                    seed,
                } => {
                    let mut drop = rng::stream(*seed, streams::DROPOUT);
                    for k in 0..*passes {
                        for start in (0..n).step_by(CHUNK) {
                            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
                            let logits = net_forward(params, &data.batch(&idx), Some(&mut drop))?;
                            out[s0 + k].extend(softmax_rows(&logits));
                        }
                    }
                }
            }
            s0 += g.len();
        }
        Ok(out)
    }
}

fn apply_head(feats: &Tensor, head: &[f64], h: usize, c: usize) -> Vec<Vec<f64>> {
    let (w, b) = head.split_at(h * c);
    let logits: Vec<f64> = (0..feats.rows())
        .flat_map(|i| {
            let f = feats.row(i);
            (0..c).map(move |k| b[k] + (0..h).map(|j| f[j] * w[j * c + k]).sum::<f64>())
        })
        .collect();
    softmax_rows(&Tensor::new(vec![feats.rows(), c], logits).expect("logit shape"))
}

/// Arithmetic mean of per-sample probability rows for one input.
pub fn predictive(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("no probability rows".into()))?;
    let c = first.len();
    let mut out = vec![0.0; c];
    for r in rows {
        if r.len() != c {
            return Err(Error::Shape("probability rows of different lengths".into()));
        }
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("probability row sums to {s}")));
        }
        out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| argmax(p) == l)
        .count();
    hits as f64 / probs.len() as f64
}

/// Expected calibration error with `bins` equal-width bins over `(0, 1]`.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for (p, &l) in probs.iter().zip(labels) {
        let k = argmax(p);
        let c = p[k];
        // bin b covers (b/B, (b+1)/B]
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += c;
        if k == l {
            hits[b] += 1.0;
        }
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n)
        .sum())
}

/// Sum over classes of the population variance across samples.
pub fn epistemic_variance(rows: &[Vec<f64>]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let s = rows.len() as f64;
    (0..rows[0].len())
        .map(|k| {
            // Shifted by the first row so identical rows give exactly zero.
            let x0 = rows[0][k];
            let m1 = rows.iter().map(|r| r[k] - x0).sum::<f64>() / s;
            let m2 = rows.iter().map(|r| (r[k] - x0).powi(2)).sum::<f64>() / s;
            (m2 - m1 * m1).max(0.0)
        })
        .sum()
}

/// Probability that an OOD score exceeds an in-distribution score, ties
/// counting one half (the Mann-Whitney statistic).
pub fn auroc(in_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if in_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::InvalidArgument(
            "auroc needs non-empty score lists".into(),
        ));
    }
    if in_scores.iter().chain(ood_scores).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let mut inn = in_scores.to_vec();
    inn.sort_by(f64::total_cmp);
    // Counted in half-units so the sum stays an exact integer.
    let mut halves: u128 = 0;
    for &o in ood_scores {
        let below = inn.partition_point(|&v| v < o);
        let not_above = inn.partition_point(|&v| v <= o);
        halves += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(halves as f64 / (2.0 * inn.len() as f64 * ood_scores.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub num_samples: usize,
    pub accuracy: f64,
    pub ece: f64,
    /// `None` for a single deterministic model, whose scores are all zero.
    pub auroc: Option<f64>,
    pub test_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

pub const ECE_BINS: usize = 15;

/// Scores one method on a test set and an OOD set.
pub fn evaluate_method(
    samples: &PosteriorSamples,
    test: &Dataset,
    ood: &Dataset,
    method: &str,
    seed: u64,
) -> Result<EvalReport> {
    let test_rows = samples.dataset_probs(test)?;
    let ood_rows = samples.dataset_probs(ood)?;
    let per_point = |rows: &[Vec<Vec<f64>>], i: usize| -> Vec<Vec<f64>> {
        rows.iter().map(|s| s[i].clone()).collect()
    };

    let mut preds = Vec::with_capacity(test.len());
    let mut test_scores = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let r = per_point(&test_rows, i);
        preds.push(predictive(&r)?);
        test_scores.push(epistemic_variance(&r));
    }
    let ood_scores: Vec<f64> = (0..ood.len())
        .map(|i| epistemic_variance(&per_point(&ood_rows, i)))
        .collect();
    let auroc = if samples.len() > 1 {
        Some(auroc(&test_scores, &ood_scores)?)
    } else {
        None
    };
    Ok(EvalReport {
        method: method.to_string(),
        seed,
        num_samples: samples.len(),
        accuracy: accuracy(&preds, test.labels()),
        ece: ece(&preds, test.labels(), ECE_BINS)?,
        auroc,
        test_scores,
        ood_scores,
    })
}
