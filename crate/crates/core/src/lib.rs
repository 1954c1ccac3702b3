//! Three-pathway video action recognition.
//!
//! Single, Slow and Fast pathways read the same clip at decreasing temporal
//! strides, exchange features through lateral connections, and feed a
//! bidirectional-LSTM or self-attention temporal head. Everything runs on a
//! small dense tensor engine with reverse-mode gradients ([`tensor`]).

pub mod backbone;
pub mod config;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Tensor, Var};
