//! Two-branch (coarse/fine) classifier with bilinear pooling and a
//! hierarchy-aware cross-entropy loss, plus synthetic data, training and
//! evaluation tooling.

pub mod backbone;
pub mod bilinear;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod trainer;
pub mod tree;

pub use error::{Error, Result};
pub use network::SbpNetwork;
pub use tensor::{Parameter, Rng, Tensor};
pub use tree::LabelTree;
