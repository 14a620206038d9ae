//! Desk-scale diffusion toy: a per-pixel cross-attention denoiser trained on
//! synthetic two-concept scenes, with time-dependent interpolation between a
//! global and per-concept local conditioning maps and a DICE sparsity
//! penalty on the local maps.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod scene;
pub mod train;

pub use denoiser::{DenoiserShape, ToyDenoiser};
pub use diffusion::{Conditioning, NoiseSchedule};
pub use error::{Result, ToyError};
pub use experiment::{ArmSummary, ToyConfig};
pub use scene::{generate_dataset, Dataset, SceneSpec};
pub use train::{train, Arm, MetricsLog, TrainConfig};
