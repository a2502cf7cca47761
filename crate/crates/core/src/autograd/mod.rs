//! Reverse-mode differentiation over a recorded tape of `f64` ops.

mod gemm;
pub mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{AttnMask, Gradients, Graph, LossParts, Var, LAYER_NORM_EPS};

pub mod suite;
