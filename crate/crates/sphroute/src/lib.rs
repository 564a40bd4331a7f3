//! File formats, run directories and the command-line driver around
//! `sphroute-core`.

pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod imageio;
pub mod run;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use run::Run;
