use std::process::ExitCode;

use clap::Parser;
use smoothcert_cli::{output, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome.summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            let report = output::error_json(&err);
            eprintln!("{report}");
            let code = report["error"]["exit_code"].as_u64().unwrap_or(1) as u8;
            ExitCode::from(code)
        }
    }
}
