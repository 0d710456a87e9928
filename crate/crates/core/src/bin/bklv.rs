use std::process::ExitCode;

use baklava::cli::{run, violations_json, Cli};
use baklava::Error;
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(out) => {
            print!("{}", out.stdout);
            ExitCode::SUCCESS
        }
        Err(Error::Validation(v)) => {
            eprintln!("{}", violations_json(&v));
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
