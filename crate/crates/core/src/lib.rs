//! 2-simplicial (trilinear) attention on the CPU.
//!
//! * [`tensor`]: sequence tensors, configuration, window arithmetic
//! * [`reference`]: dense double-precision oracle, forward and backward
//! * [`tiled`]: online-softmax tiled engine with the split backward kernels
//! * [`geometric`]: determinant logits and rotation invariance
//! * [`match3`]: the d = 7 Match3 construction and its brute-force oracle
//! * [`scaling`]: power-law fits and the attention FLOPs model
//! * [`checks`]: seeded engine-vs-reference and finite-difference runs
//! * [`cli`]: the command implementations behind the `simplex-attn` binary

pub mod checks;
pub mod cli;
pub mod error;
pub mod geometric;
pub mod match3;
pub mod reference;
pub mod scaling;
pub mod tensor;
pub mod tiled;

pub use error::{Error, Result};
pub use reference::{AttnOutput, GradBundle, LogitTensor};
pub use tiled::TileConfig;
pub use tensor::{AttnConfig, AttnInputs, AttnTensors, Element, LogitForm, Precision, SeqTensor, Shape, WindowBounds};

