pub mod autograd;
pub mod config;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod lora;
pub mod nn;
pub mod package;
pub mod rank;
pub mod swin;

pub use error::{Error, Result};
pub use linalg::Matrix;
