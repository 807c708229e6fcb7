//! File formats, configuration, reports and the command line around
//! [`yoto_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod ingest;
pub mod manifest;
pub mod report;
pub mod runner;
pub mod segfile;
pub mod stats;

pub use error::{CliError, Result};
pub use yoto_core as core;
