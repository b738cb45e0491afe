//! Dense-vector math, the seeded random stream, and the Adam optimizer.

mod adam;
mod rng;
mod vector;

pub use adam::AdamState;
pub use rng::{RngStream, RNG_ALGORITHM};
pub use vector::{
    axpy, cosine_sim, dot, l2_distance, l2_distance_sq, norm, normalize, normalize_in_place,
    softmax,
};
