pub mod accounting;
pub mod autograd;
pub mod config;
pub mod ctc;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod stream;
pub mod tensor;
pub mod toy;

pub use autograd::{Gradients, Var};
pub use config::{ChunkSpec, ModelConfig, Preset};
pub use encoder::Encoder;
pub use error::{Error, Result};
pub use loss::LossBreakdown;
pub use model::Model;
pub use rng::RandomSource;
pub use stream::StreamState;
pub use tensor::Tensor;
