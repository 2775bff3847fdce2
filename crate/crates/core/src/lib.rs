//! RaSeformer: temporal action localization with saliency-pruned local
//! attention over a multi-level temporal feature pyramid.
//!
//! The crate is generic over the scalar type (`f32` for training and
//! inference, `f64` for gradient checks and oracle tests); concrete aliases
//! are exported below.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod model;
pub mod ops;
pub mod params;
pub mod postprocess;
pub mod runner;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Train/inference precision.
pub type Tensor32 = Tensor<f32>;
/// Test/oracle precision.
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
