//! Registry, command-line interface and HTTP API for the carbon-capture
//! forecasting engine.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod registry;

pub use error::{ServiceError, ServiceResult};
pub use registry::Registry;
