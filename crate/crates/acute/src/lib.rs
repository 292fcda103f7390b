//! IO, service and command-line layer for pairwise dialogue evaluation.

pub mod cli;
pub mod config;
pub mod endpoint;
pub mod error;
pub mod eventlog;
pub mod jsonl;
pub mod server;
pub mod store;
pub mod tables;
