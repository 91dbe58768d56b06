mod args;
mod commands;
mod run_manifest;

use std::process::ExitCode;

use clap::Parser;
use peftkit::Error;

use args::{Cli, Command};

/// 2: usage or configuration, 3: data, 4: numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return if err.chain().any(|c| c.is::<std::io::Error>()) {
            3
        } else {
            2
        };
    };
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Rank { .. } | Error::NotMergeable(_) => 2,
        Error::Numeric(_) | Error::Diverged { .. } => 4,
        Error::Shape { .. }
        | Error::Parse { .. }
        | Error::Checkpoint(_)
        | Error::Io(_)
        | Error::Json(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match &cli.command {
        Command::Init(a) => commands::init(a, seed),
        Command::Quantize(a) => commands::quantize(a, seed),
        Command::Finetune(a) => commands::finetune(a, seed),
        Command::Merge(a) => commands::merge(a, seed),
        Command::Eval(a) => commands::eval(a, seed),
        Command::Report(a) => commands::report(a, seed),
    };
    let result = result.and_then(|o| {
        let path = cli.run_manifest.clone().unwrap_or(o.manifest_path);
        o.manifest.finish(&path)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
