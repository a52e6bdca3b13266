use std::process::ExitCode;

use clap::Parser;
use dyvm_cli::{run, Cli, EXIT_BAD_INPUT};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(&cli).and_then(|o| o.emit().map(|_| o.exit_code())) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_BAD_INPUT
        }
    };
    ExitCode::from(code as u8)
}
