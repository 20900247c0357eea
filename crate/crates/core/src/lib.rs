//! Conditional diffusion image restoration.
//!
//! A prompt-conditioned transformer U-Net predicts the noise of a forward
//! diffusion chain, conditioned on the degraded observation; restoration runs
//! the ancestral reverse chain from Gaussian noise. The crate also ships the
//! degradation generators, quality metrics, I/O and a command line front end.

pub mod cli;
pub mod dataio;
pub mod degrade;
pub mod denoiser;
pub mod error;
pub mod image;
pub mod metrics;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{Domain, ImageTensor};
pub use schedule::{forward_marginal, forward_step, NoiseSchedule, ScheduleConfig};
