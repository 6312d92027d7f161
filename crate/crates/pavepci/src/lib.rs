//! Pavement Condition Index (PCI) regression from pavement images.
//!
//! The crate implements a CBAM-augmented ResNet50 (plus ResNet50 and
//! DenseNet161 baselines) with a scalar regression head, a leakage-safe
//! data pipeline, a CPU training loop, regression metrics, and attention
//! visualization. Everything is deterministic given a root seed.

pub mod attention;
pub mod backbones;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor1, Tensor2, Tensor3, Tensor4};
