//! Pool-based active domain adaptation.
//!
//! A source-trained classifier is adapted to a shifted target domain over a
//! fixed number of annotation rounds. Each round scores every sample with a
//! cross-entropy "informativeness" value taken at either its ground-truth
//! label or a top-k feature-similarity label, fits a four-component
//! semi-supervised Gaussian mixture over those scores, sends the samples most
//! likely to be uncertain-inconsistent to the labeling oracle, and trains the
//! remaining confident-consistent and uncertain-consistent samples with a
//! consistency loss and an entropy loss respectively.
//!
//! Module map:
//! - [`datapool`]: source/target pools, synthetic shifted datasets, the oracle.
//! - [`classifier`]: one-hidden-layer softmax model, losses and gradients.
//! - [`scoring`]: centroids, top-k IoU labels, informativeness scores,
//!   observation labels.
//! - [`gmm`]: the semi-supervised four-component mixture.
//! - [`sampler`]: batch selection, partitioning, the source-free bootstrap and
//!   the consistency-rate diagnostic.
//! - [`harness`]: the adaptation loop, baselines and metrics.

pub mod classifier;
pub mod datapool;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod math;
pub mod sampler;
pub mod scoring;

pub use classifier::{Classifier, ProbVec, TrainConfig};
pub use datapool::{DataPool, Domain, Sample, SampleId, ShiftConfig, ShiftKind};
pub use error::{Error, Result};
pub use gmm::{GmmFit, GmmParams, GmmTrainSet};
pub use harness::{LoopConfig, RoundReport, RunOutcome, Strategy};
pub use sampler::{Partition, SfdaConfig};
pub use scoring::{Category, CentroidSet, InfoScore, SimilarityIndex};
