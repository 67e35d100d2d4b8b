//! `t2s`: corpus generation, unit discovery, training, translation,
//! synthesis, and evaluation as one batch-oriented command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error,
//! 3 numeric failure. All randomness flows from `--seed`; components
//! derive their own streams from it, so equal invocations are bitwise
//! reproducible.

mod commands;
mod resolve;

use clap::error::ErrorKind as ClapErrorKind;
use clap::Parser;
use commands::Cli;
use t2s_core::error::ErrorKind;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // clap pre-formats help/usage output.
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = commands::run(cli) {
        eprintln!("error: {err}");
        let code = match err.kind() {
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        };
        std::process::exit(code);
    }
}
