use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = promptseg_cli::Cli::parse();
    match promptseg_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
