//! Command-line tools and the HTTP supervision service over `orchard_core`.

pub mod commands;
pub mod server;
