use std::io::Write;
use std::process::ExitCode;

use augshuffle::cli::{self, Cli, Outcome};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = cli::run(&cli, &mut out);
    let _ = out.flush();
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("augshuffle: {msg}");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("augshuffle: {e}");
            ExitCode::FAILURE
        }
    }
}
