//! Per-second student engagement classification from facial-embedding
//! sequences, with leave-one-subject-out evaluation and active-learning
//! personalization.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which training and gradient checks assume.

pub mod classifiers;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod level;
pub mod linalg;
pub mod pca;
pub mod personalization;
pub mod scalar;
pub mod sequence;
pub mod synthetic;
pub mod tracklets;

pub use classifiers::{ClassifierSpec, Family, Hyperparameters, InputMode, ModelInput, TrainingInputs, TrainingReport};
pub use error::{Error, Result};
pub use fusion::{Channel, SampleInput};
pub use level::{EngagementLevel, Thresholds};
pub use personalization::{PersonalizationConfig, SessionSnapshot, Strategy};
pub use scalar::Scalar;
pub use sequence::{Modality, SecondKey};

pub type Real = f64;
pub type Distribution = level::LabelDistribution<Real>;
pub type Sequence = sequence::Sequence<Real>;
pub type ModalityPair = sequence::ModalityPair<Real>;
pub type Dataset = dataset::LabeledSequenceSet<Real>;
pub type Model = classifiers::TrainedModel<Real>;
pub type Predictor = fusion::Predictor<Real>;
pub type Sample = fusion::LabeledSample<Real>;
pub type Pca = pca::PcaModel<Real>;
pub type Pool = personalization::UnlabeledPool<Real>;
pub type Session = personalization::PersonalizationSession<Real>;
pub type Setup = personalization::SessionSetup<Real>;

/// Single-precision variants for storage-sensitive inference.
pub type Distribution32 = level::LabelDistribution<f32>;
pub type Model32 = classifiers::TrainedModel<f32>;
pub type Sequence32 = sequence::Sequence<f32>;
