//! Abstractive summarization with a pointer-generator trained adversarially
//! against a TextCNN discriminator.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod policy;
pub mod rl;
pub mod rollout;
pub mod rouge;
pub mod tensor;
pub mod testbed;

pub use error::{Error, Result};
