//! Multi-step modality fusion for image assessment with auxiliary attributes.

pub mod data;
pub mod model;
pub mod objectives;
pub mod error;
pub mod harness;

pub use error::{Error, Result};
