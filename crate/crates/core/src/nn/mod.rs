//! Neural-network building blocks: parameters, layers, attention and masks.

pub mod attention;
pub mod layers;
pub mod mask;
pub mod params;

pub use attention::{sinusoid_table, MultiHeadAttention, PosEncoding};
pub use layers::{dropout, residual_branch, Conv2d, FeedForward, LayerNorm, Linear};
pub use mask::Mask;
pub use params::{Builder, Init, Mode, ParamEntry, ParamId, ParamStore, Pass};
