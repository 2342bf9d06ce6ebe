mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn run(cli: Cli) -> dycklab::Result<bool> {
    match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&a).map(|_| true),
        Command::Sweep(a) => commands::sweep(&a).map(|_| true),
        Command::ExportWeights(a) => commands::export_weights(&a).map(|_| true),
        Command::Verify(a) => {
            let report = commands::verify(&a)?;
            println!("{report}");
            if let Some(path) = &a.report {
                let text = serde_json::to_string_pretty(&report)?;
                std::fs::write(path, text + "\n")?;
            }
            Ok(report.succeeded())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
