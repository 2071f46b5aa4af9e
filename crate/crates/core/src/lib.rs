//! Unsupervised domain adaptation on pre-extracted features.
//!
//! The pipeline has two halves:
//!
//! 1. [`selector`] ranks candidate feature extractors by the distance
//!    between source and target domain means and keeps the closest one.
//! 2. [`pseudo::recurrent_fit`] trains a softmax head ([`classifier`]) on
//!    source cross-entropy plus a multi-kernel MMD term ([`mmd`]), then
//!    repeatedly adds target rows whose top class probability clears a
//!    rising threshold as pseudo-labeled training data.
//!
//! [`diagnostics`] turns a run's marginal and conditional distances into a
//! divergence estimate and uses it to tune the iteration count and the
//! threshold schedule without looking at target labels. [`feature_store`]
//! owns the on-disk formats and a synthetic data generator.
//!
//! Kernel sums, extractor scoring and grid cells run on rayon when the
//! `parallel` feature is enabled (default); results are identical either way.

pub mod classifier;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod feature_store;
pub mod mmd;
pub mod pseudo;
pub mod selector;

pub use classifier::{ClassifierHead, TrainConfig};
pub use diagnostics::{estimate_divergence, evaluate_accuracy, tune, DivergenceReport, TuneGrid};
pub use error::{Error, Result};
pub use feature_store::{FeatureSet, UnlabeledFeatureSet};
pub use mmd::KernelBank;
pub use pseudo::{recurrent_fit, source_only_baseline, RecurrentConfig, RunReport};
pub use selector::{select_best, SelectionMetric, SelectionReport};
