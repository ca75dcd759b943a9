use std::process::ExitCode;

use clap::Parser;
use fhmm_core::cli::{execute, exit_code, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = cli.into_config().and_then(|cfg| execute(&cfg));
    match outcome {
        Ok(written) => {
            for path in written {
                eprintln!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("fhmm: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
