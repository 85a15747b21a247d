//! Partial-sensing long-term traffic forecasting.
//!
//! Given recent flow rates measured at a subset of road locations, forecast
//! the next hours of traffic at the locations without sensors. The model is
//! trained in three stages (past-unsensed estimation, long-term forecasting
//! of sensed locations, aggregation) over rank-based node embeddings and
//! embedding-enhanced spatial transfer matrices.
//!
//! All numerics are generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the crate root fix the default `f64` instantiation.

pub mod dataio;
pub mod diffcore;
pub mod embeddings;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod transfer;

pub use error::{Result, StpsError};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph = diffcore::Graph<f64>;
pub type ParameterStore = diffcore::ParameterStore<f64>;
pub type Model = pipeline::StpsModel<f64>;
pub type Model32 = pipeline::StpsModel<f32>;
pub type MetricsReport = metrics::MetricsReport;
