//! Adversarial training, test-time adaptive batch normalization, PGD/EoT
//! attacks, randomized-smoothing certification and corruption robustness
//! metrics for small image classifiers, in 64-bit floating point with
//! seeded, schedule-independent randomness.

pub mod attacks;
pub mod corruptions;
pub mod data;
pub mod error;
pub mod network;
pub mod rng;
pub mod smoothing;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
