//! Datasets: IDX readers, synthetic two-moons, and in/out-of-distribution pairs.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Affine map `x -> (x - shift) / scale` applied to raw features.
///
/// Either one global entry or one entry per feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            shift: vec![0.0],
            scale: vec![1.0],
        }
    }

    /// Per-feature mean / standard deviation of row-major `features`.
    pub fn per_feature(features: &[f64], dim: usize) -> Self {
        let n = (features.len() / dim) as f64;
        let mut shift = vec![0.0; dim];
        for row in features.chunks(dim) {
            shift.iter_mut().zip(row).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; dim];
        for row in features.chunks(dim) {
            for j in 0..dim {
                var[j] += (row[j] - shift[j]).powi(2) / n;
            }
        }
        let scale = var
            .iter()
            .map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self { shift, scale }
    }

    /// One mean / standard deviation over every value.
    pub fn global(features: &[f64]) -> Self {
        let n = features.len() as f64;
        let mean = features.iter().sum::<f64>() / n;
        let var = features.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            shift: vec![mean],
            scale: vec![if var > 0.0 { var.sqrt() } else { 1.0 }],
        }
    }

    pub fn apply(&self, features: &mut [f64]) {
        let k = self.shift.len();
        for (i, x) in features.iter_mut().enumerate() {
            let j = i % k;
            *x = (*x - self.shift[j]) / self.scale[j];
        }
    }
}

/// Features and labels for one split. Features are row-major with per-example
/// shape `feature_shape`; images use `(height, width, channels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    feature_shape: Vec<usize>,
    features: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    normalization: Normalization,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        feature_shape: Vec<usize>,
        features: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let dim: usize = feature_shape.iter().product();
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset must be non-empty".into()));
        }
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Shape(format!(
                "{} labels need {} feature values of shape {feature_shape:?}, got {}",
                labels.len(),
                dim * labels.len(),
                features.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            name: name.into(),
            feature_shape,
            features,
            labels,
            num_classes,
            normalization: Normalization::identity(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.features[i * d..(i + 1) * d]
    }

    /// Batch tensor of shape `(indices.len(), feature_shape...)`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.feature_shape);
        Tensor::new(shape, data).expect("batch shape")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Applies `norm` to the raw features and records it.
    pub fn normalized(mut self, norm: &Normalization) -> Self {
        norm.apply(&mut self.features);
        self.normalization = norm.clone();
        self
    }

    /// First `n` examples (or all when `n >= len`).
    pub fn truncated(mut self, n: usize) -> Self {
        if n > 0 && n < self.len() {
            let d = self.feature_dim();
            self.labels.truncate(n);
            self.features.truncate(n * d);
        }
        self
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic(format!(
            "expected {IDX_IMAGES_MAGIC:#010x} for images, found {magic:#010x}"
        )));
    }
    let n = read_u32(bytes, 4, "image")? as usize;
    let rows = read_u32(bytes, 8, "image")? as usize;
    let cols = read_u32(bytes, 12, "image")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Truncated(format!(
            "image payload has {} bytes, header declares {need}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, &payload[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic(format!(
            "expected {IDX_LABELS_MAGIC:#010x} for labels, found {magic:#010x}"
        )));
    }
    let n = read_u32(bytes, 4, "label")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Truncated(format!(
            "label payload has {} bytes, header declares {n}",
            payload.len()
        )));
    }
    Ok(&payload[..n])
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from raw IDX bytes; pixels are scaled to `[0, 1]`.
pub fn dataset_from_idx(name: &str, images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if n != labels.len() {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(name, vec![rows, cols, 1], features, labels, classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    dataset_from_idx(&name, &images, &labels)
}

/// Re-encodes a `[0, 1]`-scaled image dataset as IDX byte strings.
pub fn dataset_to_idx(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = data.feature_shape();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::Shape(format!(
            "not a single-channel image dataset: {s:?}"
        )));
    }
    let pixels: Vec<u8> = data
        .features()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let labels: Vec<u8> = data.labels().iter().map(|&l| l as u8).collect();
    Ok((
        encode_idx_images(s[0], s[1], &pixels),
        encode_idx_labels(&labels),
    ))
}

/// Centroid of the two-moons support.
pub const MOONS_CENTROID: [f64; 2] = [0.5, 0.25];

/// Two interleaving half circles. Class 0 is the upper unit semicircle at the
/// origin, class 1 the lower semicircle centred at `(1, 0.5)`. Class 0 gets
/// the extra point when `n` is odd.
pub fn make_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("two moons needs n >= 2".into()));
    }
    let mut r = rng::seeded(seed);
    let n0 = n.div_ceil(2);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = r.random::<f64>() * PI;
        let (x, y, label) = if i < n0 {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        let nx = noise_std * rng::normal(&mut r);
        let ny = noise_std * rng::normal(&mut r);
        features.extend_from_slice(&[x + nx, y + ny]);
        labels.push(label);
    }
    Dataset::new("two_moons", vec![2], features, labels, 2)
}

/// Points on a circle of `radius` around the moons' centroid, with the same
/// isotropic noise as the moons. Labels are placeholders.
pub fn make_ring(n: usize, radius: f64, noise_std: f64, seed: u64) -> Result<Dataset> {
    let mut r = rng::seeded(seed);
    let mut features = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t = r.random::<f64>() * 2.0 * PI;
        let nx = noise_std * rng::normal(&mut r);
        let ny = noise_std * rng::normal(&mut r);
        features.push(MOONS_CENTROID[0] + radius * t.cos() + nx);
        features.push(MOONS_CENTROID[1] + radius * t.sin() + ny);
    }
    Dataset::new("ring", vec![2], features, vec![0; n], 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    TwoMoonsVsRing,
    MnistVsFashion,
    FashionVsMnist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub noise_std: f64,
    pub ring_radius: f64,
    /// Directory with `train-images-idx3-ubyte` etc. for MNIST.
    pub mnist_dir: Option<PathBuf>,
    pub fashion_dir: Option<PathBuf>,
    /// Caps on image split sizes; 0 keeps everything.
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 1000,
            n_ood: 1000,
            noise_std: 0.1,
            ring_radius: 4.0,
            mnist_dir: None,
            fashion_dir: None,
            train_limit: 0,
            test_limit: 0,
        }
    }
}

/// Train/test split of one source plus an out-of-distribution set, all
/// normalized with the training statistics.
#[derive(Clone, Debug)]
pub struct OodPair {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
}

fn idx_split(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    if !images.exists() || !labels.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing IDX files under {}", dir.display()),
        )));
    }
    load_idx(&images, &labels)
}

fn image_pair(
    in_dir: &Path,
    out_dir: &Path,
    cfg: &DataConfig,
    names: (&str, &str),
) -> Result<OodPair> {
    let train = idx_split(in_dir, true)?.truncated(cfg.train_limit);
    let test = idx_split(in_dir, false)?.truncated(cfg.test_limit);
    let ood = idx_split(out_dir, false)?.truncated(cfg.test_limit);
    let norm = Normalization::global(train.features());
    let mut train = train.normalized(&norm);
    let mut test = test.normalized(&norm);
    let mut ood = ood.normalized(&norm);
    train.name = format!("{}_train", names.0);
    test.name = format!("{}_test", names.0);
    ood.name = format!("{}_ood", names.1);
    Ok(OodPair { train, test, ood })
}

pub fn make_ood_pair(kind: PairKind, cfg: &DataConfig, seed: u64) -> Result<OodPair> {
    let dir = |d: &Option<PathBuf>, what: &str| {
        d.clone()
            .ok_or_else(|| Error::Config(format!("{what} directory not configured")))
    };
    match kind {
        PairKind::TwoMoonsVsRing => {
            let train = make_two_moons(
                cfg.n_train,
                cfg.noise_std,
                rng::stream(seed, streams::DATA_TRAIN).random(),
            )?;
            let test = make_two_moons(
                cfg.n_test,
                cfg.noise_std,
                rng::stream(seed, streams::DATA_TEST).random(),
            )?;
            let ood = make_ring(
                cfg.n_ood,
                cfg.ring_radius,
                cfg.noise_std,
                rng::stream(seed, streams::DATA_OOD).random(),
            )?;
            let norm = Normalization::per_feature(train.features(), 2);
            Ok(OodPair {
                train: train.normalized(&norm),
                test: test.normalized(&norm),
                ood: ood.normalized(&norm),
            })
        }
        PairKind::MnistVsFashion => image_pair(
            &dir(&cfg.mnist_dir, "mnist")?,
            &dir(&cfg.fashion_dir, "fashion")?,
            cfg,
            ("mnist", "fashion"),
        ),
        PairKind::FashionVsMnist => image_pair(
            &dir(&cfg.fashion_dir, "fashion")?,
            &dir(&cfg.mnist_dir, "mnist")?,
            cfg,
            ("fashion", "mnist"),
        ),
    }
}
