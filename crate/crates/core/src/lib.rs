pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod features;
pub mod ladder;
pub mod layers;
pub mod tensor;
pub mod trainer;

mod codec;

pub use error::{Error, Result};
