//! Command-line front end: config parsing, artifact IO, manifests, plots
//! and the command implementations behind the `w2rf` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod svg;

pub use commands::{execute, replay, Invocation, ReplayReport};
pub use config::Config;
pub use error::CliError;
pub use manifest::RunManifest;
