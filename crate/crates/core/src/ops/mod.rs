//! Differentiable operations on [`Var`](crate::Var). Each file adds methods.

pub mod activation;
pub(crate) mod basic;
pub mod conv;
pub(crate) mod linalg;
pub mod norm;
mod softmax;
mod special;

pub use activation::Activation;
pub use conv::{ConvSpec, Padding};
pub use norm::LAYER_NORM_EPS;
