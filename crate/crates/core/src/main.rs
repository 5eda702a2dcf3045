use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = memshape::cli::Cli::parse();
    let stdout = std::io::stdout();
    match memshape::cli::run(&cli, &mut stdout.lock()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(memshape::cli::EXIT_INPUT_ERROR)
        }
    }
}
