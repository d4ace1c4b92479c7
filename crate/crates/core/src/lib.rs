//! Multi-task still-image action recognition: a shared convolutional
//! backbone feeds a classifier (global average pooling plus one linear layer)
//! and a person-heatmap regressor whose L2 loss steers the shared features
//! toward the person. Includes activation-map analysis (SAM/PAM), mean
//! average precision evaluation, a synthetic misleading-context benchmark
//! and a deterministic trainer.

pub mod activation;
pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mask;
pub mod network;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
