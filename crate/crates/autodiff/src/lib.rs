//! Reverse-mode automatic differentiation over dense `f64` image tensors.
//!
//! The engine is deliberately narrow: it supports the operations needed by
//! small convolutional generators and discriminators (convolutions, group
//! normalization, spectral weight normalization, resampling, masking and the
//! usual pointwise and reduction ops) at batch size one.

pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use nn::{Conv2d, ConvSpec};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{Binder, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} outside palette of {classes} classes")]
    Palette { label: usize, classes: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unknown parameter: {0}")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, Error>;
