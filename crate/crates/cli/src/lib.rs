//! Node daemon, HTTP API and operator commands for the delay-tolerant
//! learning network.

pub mod api;
pub mod commands;
pub mod config;
pub mod daemon;
mod link;
