//! Desk-scale engine for large-scale margin-softmax face-recognition training:
//! a simulated model-parallel classifier with Partial-FC sampling, a
//! classification-layer memory/communication cost model, iterative embedding
//! cleaning, latency-guided architecture search, and a small end-to-end
//! trainer with mixed-precision emulation.
//!
//! Numeric modules are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

mod binfmt;
pub mod clean;
pub mod cost;
pub mod dataset;
pub mod emb;
pub mod error;
pub mod exact;
pub mod loss;
pub mod matrix;
pub mod nas;
pub mod precision;
pub mod scalar;
pub mod shard;
pub mod synth;
pub mod train;

pub use dataset::EmbeddingDataset;
pub use error::{Error, Result};
pub use exact::ExactSum;
pub use loss::{LossConfig, LossKind};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
