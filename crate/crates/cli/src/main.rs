use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let args = hessquant_cli::cli::Cli::parse();
    match hessquant_cli::cli::execute(&args) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
