//! Training laboratory for importance-scaled CNN heads: a small
//! from-scratch CNN whose fully connected weights are rescaled by
//! min-max-normalized Gradient SHAP attributions of the head's input
//! features, optionally blended with the normalized weights themselves.

pub mod convnet;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod shap;
pub mod tensor;
pub mod trainer;
pub mod update;

pub use convnet::{BackboneConfig, Model};
pub use datasets::{Dataset, Sample, Split, SynthConfig};
pub use error::{Error, Result};
pub use shap::{ImportanceMatrix, ImportanceStage, LinearHead, ShapConfig};
pub use tensor::{Graph, Tensor, Var};
pub use trainer::TrainConfig;
pub use update::{AdamConfig, AdamState, BlendConfig, ScaleCadence};
