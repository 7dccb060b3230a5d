pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
