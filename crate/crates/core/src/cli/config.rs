use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, PairKind};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::lleb::{LlebConfig, RegularizationConfig};
use crate::nets::{Architecture, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Default,
    Lleb,
    LlebE2e,
    Mcd,
    Lll,
    FcSampler,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Default => "default",
            Method::Lleb => "lleb",
            Method::LlebE2e => "lleb_e2e",
            Method::Mcd => "mcd",
            Method::Lll => "lll",
            Method::FcSampler => "fc_sampler",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchProfile {
    TwoMoonsMlp,
    Mnist,
}

/// Flat experiment description. Every key has a documented default; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub pair: PairKind,
    pub arch: ArchProfile,
    pub seeds: Vec<u64>,
    /// Ensemble size M.
    pub ensemble: usize,
    /// Posterior draws per prediction and per flow gradient step.
    pub samples: usize,
    pub lambda: f64,
    pub entropy_samples: usize,
    /// Laplace prior precision.
    pub tau: f64,

    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,

    /// Flow stage of two-step training.
    pub flow_epochs: usize,
    pub flow_lr: f64,
    pub flow_batch_size: usize,

    pub hidden_features: usize,
    pub coupling_layers: usize,
    pub residual_blocks: usize,
    pub bins: usize,
    pub tail_bound: f64,

    pub mlp_hidden: usize,
    pub mlp_dropout: f64,
    pub mnist_dropout: f64,

    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub noise_std: f64,
    pub ring_radius: f64,
    pub mnist_dir: Option<PathBuf>,
    pub fashion_dir: Option<PathBuf>,
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let flow = FlowConfig::default();
        let two = LlebConfig::two_step_default();
        let data = DataConfig::default();
        Self {
            method: Method::Default,
            pair: PairKind::TwoMoonsVsRing,
            arch: ArchProfile::TwoMoonsMlp,
            seeds: vec![0, 1, 2, 3, 4],
            ensemble: 1,
            samples: 10,
            lambda: 0.0,
            entropy_samples: RegularizationConfig::default().entropy_samples,
            tau: 1.0,
            epochs: train.epochs,
            lr: train.lr,
            batch_size: train.batch_size,
            weight_decay: train.weight_decay,
            clip_norm: train.clip_norm,
            flow_epochs: two.train.epochs,
            flow_lr: two.train.lr,
            flow_batch_size: two.train.batch_size,
            hidden_features: flow.hidden_features,
            coupling_layers: flow.coupling_layers,
            residual_blocks: flow.residual_blocks,
            bins: flow.bins,
            tail_bound: flow.tail_bound,
            mlp_hidden: 64,
            mlp_dropout: 0.1,
            mnist_dropout: 0.5,
            n_train: data.n_train,
            n_test: data.n_test,
            n_ood: data.n_ood,
            noise_std: data.noise_std,
            ring_radius: data.ring_radius,
            mnist_dir: None,
            fashion_dir: None,
            train_limit: 0,
            test_limit: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.ensemble == 0 || self.samples == 0 {
            return Err(Error::Config(
                "ensemble and samples must be positive".into(),
            ));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.lambda != 0.0
            && !matches!(
                self.method,
                Method::Lleb | Method::LlebE2e | Method::FcSampler
            )
        {
            return Err(Error::Config(format!(
                "lambda has no effect for method {}",
                self.method.name()
            )));
        }
        if self.lambda != 0.0 && self.method == Method::FcSampler {
            return Err(Error::Config(
                "entropy regularization needs a density; fc_sampler has none".into(),
            ));
        }
        let image_pair = self.pair != PairKind::TwoMoonsVsRing;
        if image_pair != (self.arch == ArchProfile::Mnist) {
            return Err(Error::Config(format!(
                "architecture {:?} does not fit dataset pair {:?}",
                self.arch, self.pair
            )));
        }
        if self.method == Method::Mcd && !self.architecture().has_dropout() {
            return Err(Error::Config("mcd needs a dropout rate above zero".into()));
        }
        self.train_config().validate()?;
        self.flow_stage().train.validate()?;
        self.flow_config().validate()?;
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        match self.arch {
            ArchProfile::TwoMoonsMlp => {
                Architecture::two_moons_mlp(self.mlp_hidden, self.mlp_dropout)
            }
            ArchProfile::Mnist => Architecture::mnist_with_dropout(self.mnist_dropout),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }

    /// End-to-end LLEB trains on the classifier schedule.
    pub fn end_to_end_stage(&self) -> LlebConfig {
        LlebConfig {
            train: self.train_config(),
            samples: self.samples,
        }
    }

    pub fn flow_stage(&self) -> LlebConfig {
        LlebConfig {
            train: TrainConfig {
                epochs: self.flow_epochs,
                lr: self.flow_lr,
                batch_size: self.flow_batch_size,
                ..self.train_config()
            },
            samples: self.samples,
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            hidden_features: self.hidden_features,
            coupling_layers: self.coupling_layers,
            residual_blocks: self.residual_blocks,
            bins: self.bins,
            tail_bound: self.tail_bound,
            ..FlowConfig::default()
        }
    }

    pub fn regularization(&self) -> RegularizationConfig {
        RegularizationConfig {
            lambda: self.lambda,
            entropy_samples: self.entropy_samples,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            n_train: self.n_train,
            n_test: self.n_test,
            n_ood: self.n_ood,
            noise_std: self.noise_std,
            ring_radius: self.ring_radius,
            mnist_dir: self.mnist_dir.clone(),
            fashion_dir: self.fashion_dir.clone(),
            train_limit: self.train_limit,
            test_limit: self.test_limit,
        }
    }

    /// Method label used in reports, with the ensemble size when `M > 1`.
    pub fn label(&self) -> String {
        if self.ensemble > 1 {
            format!("{} x{}", self.method.name(), self.ensemble)
        } else {
            self.method.name().to_string()
        }
    }
}
