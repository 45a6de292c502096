//! Visible-spectrum face synthesis from polarimetric thermal imagery with a
//! conditional adversarial network, plus the image-quality and verification
//! evaluation around it.
//!
//! Everything runs in `f64` on the CPU through a small tape-based autodiff
//! ([`graph`]). Results are deterministic for a given seed.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod discriminator;
pub mod error;
pub mod features;
pub mod generator;
pub mod graph;
pub mod kernels;
pub mod losses;
mod nn;
pub mod optim;
pub mod params;
pub mod quality;
pub mod tensor;
pub mod training;
pub mod verify;

pub use dataio::{DatasetSplit, Protocol, StokesImage};
pub use discriminator::DiscriminatorModel;
pub use error::{Error, Result};
pub use features::{ExtractorKind, FeatureExtractor};
pub use generator::{GeneratorConfig, GeneratorModel};
pub use losses::{Ablation, LossReport, LossWeights};
pub use nn::NormMode;
pub use params::Params;
pub use tensor::{ImageTensor, Tensor, ValueRange};
pub use training::{TrainConfig, TrainState};
