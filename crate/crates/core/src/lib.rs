//! Step-level alignment of small diffusion models and denoising-time fusion of
//! several aligned models into one multi-objective sampler.
//!
//! The modules build on each other in this order:
//!
//! - [`schedule`]: noise schedules and derived coefficients.
//! - [`gaussian`]: isotropic Gaussian posteriors and their weighted product.
//! - [`nn`]: the noise-prediction MLP, its reverse-mode tape and checkpoints.
//! - [`diffusion`]: forward noising, reverse posteriors, pretraining, sampling.
//! - [`alignment`]: preference pairs, the step-level DPO loss, Reward Soup.
//! - [`msdda`]: the fused multi-model sampler and Pareto sweeps.
//! - [`oracle`]: exact discrete and closed-form checks of the theory.
//! - [`harness`]: rewards, evaluation, configuration and the full pipeline.

pub mod alignment;
pub mod diffusion;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod msdda;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod schedule;

pub use diffusion::{
    forward_sample, pretrain, reverse_mean, reverse_posterior, sample, Dataset2D, EpsilonModel,
};
pub use error::{Error, Result};
pub use gaussian::{fuse, kl_divergence, log_density, GaussianPosterior, PreferenceWeights};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleKind, ScheduleSpec};
