//! Mixed uniform/absorbing discrete diffusion.
//!
//! The forward process corrupts tokens toward a stationary target
//! distribution that mixes a uniform component (weight `k`) with a point
//! mass on a mask token (weight `1 - k`). `k = 0` is the pure masked
//! (absorbing) process and `k = 1` the pure uniform one.
//!
//! Modules:
//! - [`kernel`]: kernel, schedule, dense transition matrices, forward corruption
//! - [`scalar`]: `O(N)` posterior, KL and continuous-time loss
//! - [`oracle`]: dense-matrix reference implementations
//! - [`denoiser`]: denoiser contract, toy model, training
//! - [`sampler`]: ancestral and confidence-remasking generation
//! - [`corpus`]: character vocabulary and sequence packing
//! - [`config`], [`verify`], [`bench`]: command-line support

pub mod bench;
pub mod config;
pub mod corpus;
pub mod denoiser;
mod error;
pub mod kernel;
pub mod oracle;
pub mod sampler;
pub mod scalar;
pub mod verify;

pub use denoiser::{Denoiser, ToyDenoiser, TrainConfig};
pub use error::{Error, Result};
pub use kernel::{corrupt, dense_k, dense_q, MixedKernel, Schedule, ScheduleKind, TokenSeq};
pub use sampler::{GenSchedule, SampleTrace, TransitionTag};
pub use scalar::{Dist, ScalarContext, Simplex, DEFAULT_EPS_LOG};
