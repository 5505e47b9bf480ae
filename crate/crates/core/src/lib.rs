//! Relational LSTM and a two-branch video classifier built on a small
//! tape-based autodiff engine.

pub mod autograd;
pub mod error;
pub mod init;
pub mod model;
pub mod nonlocal;
pub mod rlstm;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{Shape3, Tensor};
