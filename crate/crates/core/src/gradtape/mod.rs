//! Minimal reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! Only the operators the training stack needs are provided: dense layers,
//! elementwise nonlinearities, reductions, row norms and the radial maps of
//! the Poincaré ball. Graphs are rebuilt for every evaluation.

mod check;
pub mod geom;
mod graph;
mod layers;

pub use check::{grad_check, GradCheckReport, ParamCheck, FD_STEP};
pub use graph::{Gradients, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
pub use layers::{Activation, DenseLayer, Mlp};
