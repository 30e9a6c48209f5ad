//! Mislabel detection for imbalanced classification datasets.
//!
//! A small classifier is trained several times on the development split, the
//! per-sample focal losses are averaged, and a three-component univariate
//! Gaussian mixture separates clean, hard and noisy samples. The cleaning
//! pipeline first corrects the labels whose noise probability would drop the
//! most under the model's proposed label, retrains, and then filters the
//! samples that still look noisy.
//!
//! Module map:
//!
//! - [`dataset`]: manifests, synthetic corpora and cleaned split emission
//! - [`classifier`]: MLP with focal loss, AdamW, and the per-sample loss ledger
//! - [`gmm`]: EM fit of the loss mixture and noise posteriors
//! - [`injection`]: uncertainty-targeted label noise with ground truth
//! - [`pipeline`]: the correct-then-filter procedure producing a [`pipeline::CleaningPlan`]
//! - [`eval`]: detection reports, classification metrics, precision@k, PCA export
//! - [`review`]: suspect sampling, adjudication log and consensus

pub mod classifier;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod injection;
pub mod pipeline;
pub mod review;
pub mod util;

pub use classifier::{focal_loss, LossLedger, Mlp, TrainingConfig};
pub use dataset::{Dataset, SampleRecord, Split, SyntheticConfig};
pub use error::{Error, Result};
pub use eval::{ClassificationMetrics, DetectionReport};
pub use gmm::{ComponentRoles, FitOptions, GmmModel};
pub use injection::{InjectionReport, UncertaintyScore};
pub use pipeline::{CleaningPlan, NoiseAssessment, PipelineConfig};
pub use review::{Adjudication, ConsensusResult, SuspectSample, Verdict};
