//! Vectorized HD map construction from noisy bird's-eye-view features with
//! uncertainty-aware decoding and image-space prompts.
//!
//! The array engine, camera geometry, assignment and chamfer/AP metrics are
//! generic over [`Scalar`]; the learned blocks run in `f64`. The aliases
//! below fix the scalar for everyday use.

pub mod config;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod instrument;
pub mod losses;
pub mod mq_distill;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod scenegen;
pub mod ua_decoder;
pub mod ui2dprompt;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Array = diffcore::DiffArray<f64>;
pub type Params = diffcore::ParamStore<f64>;
pub type Camera = geometry::CameraModel<f64>;
pub type EgoPolyline = geometry::Polyline2D<f64, geometry::Ego>;
pub type ImagePolyline = geometry::Polyline2D<f64, geometry::Image>;
pub type Prediction = eval::Detection<f64>;
pub type Truth = eval::GroundTruth<f64>;
