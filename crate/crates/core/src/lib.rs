//! Dual-path domain adaptation for deepfake detection over precomputed
//! embeddings. The core is generic over the float type; the aliases below pick
//! the precision used by the binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pseudo;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model = model::ModelState<f64>;
pub type ModelF32 = model::ModelState<f32>;
pub type Embeddings = data::EmbeddingSet<f64>;
pub type Session = trainer::Session<f64>;
