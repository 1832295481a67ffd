//! Feature-wise transformation (FTM) adaptation for cross-domain few-shot
//! scene classification.

pub mod autograd;
pub mod data;
pub mod error;
pub mod ftm;
pub mod kv;
pub mod mapping;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
