//! Classifiers: architectures, forward passes, cross-entropy, Adam and the
//! maximum-likelihood training loop.

pub mod arch;
pub mod model;
pub mod optim;
pub mod train;

pub use arch::{Architecture, Layer};
pub use model::{
    cross_entropy, extract_features, features, head, head_from_flat, logits, net_forward,
    softmax_rows, ClassifierParams,
};
pub use optim::{clip_grad_norm, global_norm, AdamState};
pub use train::{epoch_batches, fit_classifier, train_classifier, TrainConfig};
