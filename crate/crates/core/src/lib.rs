//! Single-positive multi-label learning with vision-language pseudo-labels.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line driver.

pub mod embedding_store;
pub mod losses;
pub mod metrics;
pub mod probe;
pub mod pseudo_label;
pub mod scalar;
pub mod spml_dataset;
pub mod sweep;

pub use embedding_store::{EmbeddingKind, EmbeddingMatrix, Manifest, SyntheticData, SyntheticSpec};
pub use losses::{LossConfig, LossResult, LossVariant};
pub use metrics::EvalReport;
pub use probe::{EvalSet, ProbeModel, TrainConfig, TrainOutcome};
pub use pseudo_label::PseudoLabelConfig;
pub use scalar::Scalar;
pub use spml_dataset::{AnnotationMatrix, DatasetSplit, LabelState};
pub use sweep::{SweepResult, SweepSpec, SweepSummary};

pub type EmbeddingMatrixF32 = EmbeddingMatrix<f32>;
pub type EmbeddingMatrixF64 = EmbeddingMatrix<f64>;
pub type ProbeModelF32 = ProbeModel<f32>;
pub type ProbeModelF64 = ProbeModel<f64>;
pub type LossResultF64 = LossResult<f64>;
pub type SyntheticDataF64 = SyntheticData<f64>;
