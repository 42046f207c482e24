//! Blind super-resolution with a diffusion-estimated degradation/content
//! prior.
//!
//! The pieces are: a synthetic degradation pipeline ([`degradation`]), two
//! prior encoders ([`encoders`]), a small conditional diffusion model over the
//! prior vector ([`diffusion`]), the prior-conditioned transformer
//! ([`transformer`]), the two-stage trainer ([`training`]) and evaluation
//! ([`metrics`]). Everything is generic over `f32`/`f64`; the aliases below
//! name the common instantiations.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod degradation;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod training;
pub mod transformer;

pub use blindsr_tensor::Scalar;
pub use error::{Error, Result};

pub type Image32 = imaging::Image<f32>;
pub type Image64 = imaging::Image<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type TrainState64 = training::TrainState<f64>;
pub type HrSet32 = data::HrSet<f32>;
