pub mod audit;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod jsonl;
pub mod labeler;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod sde;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
