//! Command-line driver for the offline-to-online imitation pipeline.

use std::fmt;
use std::path::PathBuf;

use clap::Parser;

pub mod commands;
pub mod config;
pub mod experiments;
pub mod report;

#[derive(Debug, Parser)]
#[command(
    name = "dualimit",
    version,
    about = "Offline-to-online imitation learning on grid worlds"
)]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: commands::Command,
}

/// A check or solver that ran but did not meet its numerical target.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "numerical failure: {}", self.0)
    }
}

impl std::error::Error for NumericalFailure {}

/// 2 for numerical failures anywhere in the chain, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<NumericalFailure>().is_some()
            || e.downcast_ref::<dualimit::Error>()
                .is_some_and(dualimit::Error::is_numerical)
    });
    if numerical {
        2
    } else {
        1
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = config::RunConfig::load(cli.config.as_deref(), &cli.set)?;
    commands::run(&cli.command, &cfg, &cli.out)
}
