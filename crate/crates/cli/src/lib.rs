//! Command-line front end: `train`, `eval`, `infer`, `analyze`, `ablate`
//! and `synthesize`, plus the config and manifest types they share.

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;

pub use args::Cli;
pub use commands::run;
pub use config::{Precision, RunConfig};
pub use manifest::RunManifest;

/// Parses `argv` (including the program name), runs the command and
/// returns its output text.
pub fn run_args<I, S>(argv: I) -> anyhow::Result<String>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = Cli::try_parse_from(argv)?;
    run(&cli)
}
