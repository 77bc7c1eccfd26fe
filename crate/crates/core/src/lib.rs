//! Sparse video-text transformer at desk scale.
//!
//! Block-sparse visual attention with class-attention token pruning, a
//! text encoder with cross-modal fusion, the three pretraining objectives,
//! a staged curriculum that lengthens clips while increasing sparsity, and an
//! analytic edge/FLOP/memory cost model.

pub mod attention;
pub mod checkpoint;
pub mod costmodel;
pub mod curriculum;
pub mod encoder;
pub mod error;
pub mod gradengine;
pub mod harness;
pub mod objectives;
pub mod parallel;
pub mod pruning;
pub mod seed;
pub mod topology;

pub use error::{Error, Result};
pub use parallel::Execution;
