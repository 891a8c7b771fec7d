//! Federated fine-tuning of a miniature segment-anything style model.
//!
//! The crate covers the whole loop: a small reverse-mode autodiff engine,
//! the Mini-SAM model with optional bottleneck adapters, a synthetic Non-IID
//! segmentation corpus, client-side Adam training, FedAvg aggregation with
//! byte-exact communication accounting, and Dice/IoU evaluation.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod pretrain;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod wire;

pub use error::{Error, Result};
