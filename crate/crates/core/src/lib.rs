//! Joint forecasting of egocentric hand trajectories and object contact
//! points with partial-noising latent diffusion, plus the synthetic scene
//! generator, baselines and metrics used to train and evaluate it.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod heads;
pub mod homography;
pub mod inference;
pub mod madt;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod seeding;
pub mod synthgen;
pub mod tokenizer;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};

/// Training precision.
pub type Model32 = model::Model<f32>;
/// Gradient-check precision.
pub type Model64 = model::Model<f64>;
pub type TrainState32 = training::TrainState<f32>;
pub type Point = geometry::PixelPoint<f64>;
pub type Homography = homography::Homography<f64>;
