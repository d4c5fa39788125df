//! Library surface of the command-line tool, exposed for integration tests.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod modelcfg;
