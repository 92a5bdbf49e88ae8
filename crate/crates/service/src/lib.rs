//! HTTP API and configuration for running sketch sessions as a service.

pub mod api;
pub mod config;

pub use api::router;
pub use config::Config;
