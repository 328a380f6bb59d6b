//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] records operations on [`Var`] handles; [`Graph::backward`]
//! walks the tape in reverse and produces exact vector-Jacobian products.
//! Parameters live in a [`ParamStore`] and are bound into a graph with
//! [`Graph::param`].

pub mod checkpoint;
mod error;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{triangular_lr, triangular_peak, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::{DType, Real};
pub use tensor::Tensor;
