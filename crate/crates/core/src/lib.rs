//! Personalized face diffusion at desk scale: a procedural face corpus,
//! a small cross-attention UNet, identity/localization losses, deterministic
//! training and sampling, and analytic evaluation metrics.
//!
//! Everything runs in f64 on a single thread; all randomness fans out from
//! one root seed through named substreams, so every pipeline stage is
//! reproducible bit for bit.

pub mod autodiff;
pub mod conditioning;
pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod imageio;
pub mod losses;
pub mod sampler;
pub mod trainer;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod toyfaces;

pub use error::{Error, Result};
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
