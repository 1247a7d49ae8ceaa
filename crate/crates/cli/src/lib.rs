//! Library surface of the command-line tool, exposed so integration tests
//! drive the exact code paths the binary runs.

pub mod commands;
pub mod config;
pub mod env;
pub mod worlds;
