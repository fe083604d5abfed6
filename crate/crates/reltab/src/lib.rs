//! File formats, pipeline stages and the command-line interface around
//! `reltab-core`.

pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csv_io;
pub mod dataset;
pub mod error;
pub mod export;
pub mod fsutil;
pub mod pipeline;
pub mod schema_io;
pub mod selftest;
pub mod synthetic;

pub use error::{Error, Result};
