//! Universal rain-removal attack toolkit.
//!
//! Trains a small rain-removal network, then trains a generator whose single
//! output, a per-pixel flow field, warps any rainy observation so that the
//! rain-removal network's output degrades. Numeric code is generic over
//! [`Scalar`] (`f32` / `f64`); the aliases below name the concrete types the
//! pipeline and the gradient checks use.

pub mod config;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rain;
pub mod scalar;
pub mod seeds;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use imaging::{Image, PairedSample};
pub use metrics::SsimParams;
pub use nn::ModelParams;
pub use scalar::Scalar;
pub use warp::{FlowField, FlowMapping};

pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type FlowField32 = FlowField<f32>;
pub type FlowField64 = FlowField<f64>;
pub type PairedSample32 = PairedSample<f32>;
pub type PairedSample64 = PairedSample<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
