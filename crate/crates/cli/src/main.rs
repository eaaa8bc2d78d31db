use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = vulnlab_cli::Cli::parse();
    match vulnlab_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
