//! Synthetic detection data pipeline.

pub mod corpus;
pub mod dataset;
pub mod detection;
pub mod detector;
pub mod detector_filter;
pub mod evaluator;
pub mod generation;
pub mod geometry;
pub mod glyph;
pub mod hash;
pub mod http;
pub mod image_filter;
pub mod pipeline;
pub mod prompt;
pub mod sampler;
pub mod scalar;

pub use scalar::Scalar;

pub type Box32 = geometry::BBox<f32>;
pub type Box64 = geometry::BBox<f64>;
pub type TrainState32 = detector::TrainState<f32>;
pub type TrainState64 = detector::TrainState<f64>;
pub type Params64 = detector::Params<f64>;
