//! EM-attention semantic segmentation for solar-farm mapping, built on a
//! small reverse-mode autodiff engine.

pub mod config;
pub mod data;
pub mod emau;
pub mod error;
pub mod eval;
pub mod models;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Fill, Tape, Tensor, Var};
