//! Black-box test-time adaptation through a local steering model.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod net;
pub mod prob;
pub mod prompt;
pub mod service;
pub mod zoo;

pub use error::{Error, ErrorClass, Result};
