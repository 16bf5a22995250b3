use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use rectsr_cli::commands::{run, Cli};

fn error_line(kind: &str, message: &str, code: u8) -> String {
    serde_json::json!({"error": kind, "message": message, "exit_code": code}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first, 2));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(text) => {
            println!("{}", text.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code() as u8;
            eprintln!("{}", error_line(e.kind(), &e.to_string(), code));
            ExitCode::from(code)
        }
    }
}
