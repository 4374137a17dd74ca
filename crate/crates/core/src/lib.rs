//! Expression-conditioned video diffusion for lifting a handful of reference
//! images of a head into the frames of a driving expression sequence.

pub mod backbone;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod encoders;
pub mod error;
pub mod flowmatch;
pub mod image;
pub mod kinematics;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seeds;
pub mod synthworld;

pub use error::{Error, Result};
pub use image::Image;
pub use kinematics::{ExpressionCoeff, ExpressionTrajectory};
pub use config::RunConfig;
pub use model::{LiftModel, ModelConfig};

pub type LiftModel32 = LiftModel<f32>;
pub type LiftModel64 = LiftModel<f64>;
pub type ReferenceSet32 = conditioning::ReferenceSet<f32>;
pub type DrivingSequence32 = conditioning::DrivingSequence<f32>;
pub type TrainExample32 = flowmatch::TrainExample<f32>;
pub type Trainer32 = pipeline::Trainer<f32>;
