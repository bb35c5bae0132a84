//! Federated social-bot detection with adversarial knowledge distillation.

pub mod client;
pub mod data;
pub mod error;
pub mod experiment;
pub mod lingual;
pub mod losses;
pub mod models;
pub mod server;

pub use error::{FedError, Result};
