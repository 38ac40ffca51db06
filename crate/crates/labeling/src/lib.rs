//! Pairwise human-preference collection over multi-turn conversations.

pub mod gate;
pub mod http;
pub mod service;

pub use gate::{GateConfig, RIDDLE};
pub use http::{router, serve, serve_on};
pub use service::{Generator, Service, ServiceConfig, ServiceError};
