pub mod dsp;
pub mod error;
pub mod formats;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Mode, Tensor, Var};
