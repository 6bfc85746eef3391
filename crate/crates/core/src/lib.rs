pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod heads;
pub mod metrics;
pub mod rng;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
