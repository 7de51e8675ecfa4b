//! Live engine and WebSocket control/streaming endpoint.

pub mod engine;
pub mod protocol;
pub mod server;
