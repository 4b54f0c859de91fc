//! File formats, command line and parallel driver around `pwrd-core`.

pub mod analyze;
pub mod cli;
pub mod error;
pub mod manifest;
pub mod numfmt;
pub mod panel_csv;
pub mod power_csv;
pub mod report;
pub mod runner;
pub mod schema;

pub use error::{Error, Result};
pub use runner::Parallel;
