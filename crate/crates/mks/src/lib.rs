//! Standard-library companion of `mks-core`: binary tensor and weight
//! files, the INI run configuration, text artifacts (CSV, PGM, AP fixtures)
//! and the `mks` command line.

pub mod artifacts;
pub mod cli;
pub mod config;
mod error;
pub mod format;

pub use error::{Error, Result};
