//! `oxiwarn` — command-line front end for the SpO2 early-warning toolkit.

mod commands;
mod config;
mod error;

use clap::Parser;

fn main() {
    // Flag parsing failures exit with code 2 via the parser itself, which
    // matches our usage-error convention below.
    let cli = commands::Cli::parse();
    if let Err(e) = commands::run(cli) {
        eprintln!("oxiwarn: {e}");
        std::process::exit(e.exit_code());
    }
}
