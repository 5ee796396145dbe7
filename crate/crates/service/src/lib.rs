//! Registration ingest, actioning, review queue, and the HTTP API.

pub mod api;
pub mod config;
pub mod journal;
pub mod metrics;
pub mod policy;
pub mod review;
pub mod service;

pub use config::ServiceConfig;
pub use service::Service;
