//! Operator-facing shell around `breachgraph-core`: configuration, the
//! session registry, the HTTP API used by the console, a terminal operator
//! and the command line.

pub mod api;
pub mod cli;
pub mod config;
pub mod registry;
pub mod terminal;
