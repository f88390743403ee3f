//! Dynamic vision tokens: density-peaks token clustering, importance-weighted
//! merging, bias-augmented attention, cluster-recorded upsampling, and a
//! four-stage token pyramid with multi-stage aggregation, all deterministic
//! over seeded fixture weights.

pub mod backbone;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod error;
pub mod hash;
pub mod mta;
pub mod ppm;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod token_ops;
pub mod weights;

pub use config::{ModelConfig, StageConfig};
pub use error::{Result, TcfError};
pub use rng::SeededRng;
pub use tensor::Tensor;
pub use weights::WeightStore;
