//! Denoiser network, noise schedules, training and sampling over flattened
//! trajectories in diffusion space.

pub mod model;
mod sampler;
mod schedule;
mod train;

pub use model::{CondInput, DenoiserConfig, DenoiserModel, LossBatch, Precond};
pub use sampler::{heun_sample, CfgDenoiser, Churn, Denoise, GaussianOracle, Guide, ModelDenoiser, NoGuide, SamplerConfig};
pub use schedule::{NoiseSchedule, TrainNoiseLaw};
pub use train::{estimate_sigma_data, train, LossCurve, LrSchedule, OptimizerKind, TrainConfig};
