//! Minimal dense tensor math for small networks: a reverse-mode autodiff
//! tape, named parameter sets with a JSON wire format, Glorot init and Adam.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{NumError, Result};
pub use params::ParamSet;
pub use tape::{Bound, Gradients, Tape, Var};
pub use tensor::Tensor;
