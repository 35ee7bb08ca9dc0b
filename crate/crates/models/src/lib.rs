//! Models and datasets for sparse-training experiments.
//!
//! The MLP implements [`safe_core::Objective`], so it plugs directly into
//! [`safe_core::run_safe`] and the baselines.

pub mod data;
pub mod mlp;

pub use data::{corrupt_labels, load_mnist_dir, load_mnist_idx, synth_blobs, Dataset};
pub use mlp::{batchnorm_tune, AccuracyHook, BnStats, Metrics, Mlp, MlpSpec};

pub type Mlp64 = Mlp<f64>;
pub type Mlp32 = Mlp<f32>;
