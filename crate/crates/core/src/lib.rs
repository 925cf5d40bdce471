pub mod backbone;
pub mod conditioning;
pub mod cost;
pub mod error;
pub mod flow;
pub mod harness;
pub mod params;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
