//! Upcycling a dense decoder-only transformer into a shared-expert mixture
//! of experts, fine-tuning it, and merging it back into a dense model.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod merge;
pub mod moe;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod verify;

pub use error::{Result, XftError};
pub use tensor::{Scalar, Tensor};
