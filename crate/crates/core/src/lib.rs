//! Reverse-attention bidirectional feature-pyramid segmentation.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), a
//! hierarchical attention encoder ([`encoder`]), the reverse-attention
//! pyramid decoder ([`decoder`]), compound losses and metrics, a synthetic
//! data pipeline with augmentation, and the training/evaluation harness.

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Element, Graph, Shape, Tensor, Var};
