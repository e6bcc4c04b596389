//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] records one forward pass; [`Var`] handles are cheap `Copy`
//! references into it. Parameters live in a [`ParamStore`] outside the graph
//! and are loaded per pass, so a graph never outlives a training step.

mod element;
mod graph;
mod kernels;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use element::Element;
pub use graph::{Gradients, Graph, Var};
pub use kernels::Conv2dGeom;
pub use optim::{grad_norm, AdamW};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
