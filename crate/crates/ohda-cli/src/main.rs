use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = ohda_cli::Cli::parse();
    if let Err(err) = ohda_cli::init_logging() {
        eprintln!("error: {err}");
        return ExitCode::FAILURE;
    }
    match ohda_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err}");
            ExitCode::FAILURE
        }
    }
}
