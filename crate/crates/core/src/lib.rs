//! Learned visual-protection transforms for privacy-preserving image
//! classification, with the attacks used to evaluate them.

pub mod attacks;
pub mod classify;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod protect;
pub mod rng;
pub mod transform;

pub use config::{ExperimentConfig, Pipeline, RawConfig};
pub use data::{LabeledDataset, Split};
pub use error::{Error, Result};
pub use image::{ImageTensor, Normalization, ValueRange};
pub use losses::{LossReport, LossWeights, NormReduction};
pub use metrics::{ssim, SsimParams};
pub use models::{Architecture, ModelHandle, ModelKind, NetworkSpec};
pub use pipeline::{run, RunManifest, RunStatus};
pub use protect::PerturbationSpec;
pub use rng::SeedStream;
