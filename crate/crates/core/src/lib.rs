//! Policy-conditioned trajectory diffusion for offline cooperative MARL on
//! two-player polynomial games.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod analysis;
pub mod diffusion;
pub mod error;
pub mod games;
pub mod guidance;
pub mod marl;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod trajectory;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type GameSpec32 = games::GameSpec<f32>;
pub type GameSpec64 = games::GameSpec<f64>;
pub type Dataset32 = games::OfflineDataset<f32>;
pub type Dataset64 = games::OfflineDataset<f64>;
pub type Denoiser32 = diffusion::DenoiserModel<f32>;
pub type Denoiser64 = diffusion::DenoiserModel<f64>;
pub type Normalizer32 = transforms::CdfNormalizer<f32>;
pub type Normalizer64 = transforms::CdfNormalizer<f64>;
pub type Policy32 = marl::JointPolicy<f32>;
pub type Policy64 = marl::JointPolicy<f64>;
