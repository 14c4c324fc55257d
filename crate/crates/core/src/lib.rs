//! Distributed early-exit inference for multi-branch student CNNs.
//!
//! The crate covers the forward-only runtime (tensor kernels and the
//! multi-branch WideResNet graph), the exit policies that decide where each
//! student stops, a deterministic edge-cluster simulator, and the report
//! builders behind the `distree` command-line tool.

pub mod bench;
pub mod data;
pub mod error;
pub mod kernels;
pub mod layer;
pub mod model;
pub mod policy;
pub mod sim;
pub mod tensor;
pub mod weights;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;
pub use weights::WeightStore;
