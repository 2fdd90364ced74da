//! Reverse-mode automatic differentiation over dynamic-rank `f64` arrays.
//!
//! A [`Graph`] records every op applied to its [`Var`]s; [`Graph::backward`]
//! returns leaf gradients. Parameters live in a [`ParamStore`] and are bound
//! to a graph by name, optionally frozen. The convolution family (1-D,
//! transposed 1-D, 3-D, deformable 3-D) is implemented with im2col + GEMM.

pub mod check;
mod graph;
pub mod kernels;
mod ops;
mod optim;
mod params;

pub use graph::{Array, Gradients, Graph, Var};
pub use ops::{concat, gelu, sigmoid};
pub use optim::{Adam, GradAccumulator};
pub use params::{conv_weight, ones, uniform, zeros, ParamStore};
