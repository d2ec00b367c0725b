//! `attune` binary: the pipeline as independent subcommands.
//!
//! Exit codes are a scripting contract: 0 success, 2 validation failure
//! (bad flags, bad config, missing or malformed inputs), 3 runtime
//! failure (training abort, output write errors). Clap's own usage
//! errors also exit 2.

mod commands;
mod config;

use clap::Parser;

fn main() {
    let cli = commands::Cli::parse();
    if let Err(e) = commands::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
