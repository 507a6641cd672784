mod args;
mod commands;
mod error;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::CliResult;
use manifest::{timestamp, RunManifest, MANIFEST_FILE};
use output::{resolve_out_dir, OutputDir};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}

fn out_flag(command: &Command) -> Option<PathBuf> {
    match command {
        Command::Estimate(a) => a.out.out.clone(),
        Command::Posterior(a) => a.out.out.clone(),
        Command::Simulate(a) => a.out.out.clone(),
        Command::Report(a) => a.out.out.clone(),
        Command::Rerun(a) => a.out.out.clone(),
    }
}

/// Runs one command into its output directory and returns that directory.
fn run(command: Command) -> CliResult<PathBuf> {
    let flag = out_flag(&command);
    let command = match command {
        Command::Rerun(a) => RunManifest::load(&a.manifest)?.command()?,
        other => other,
    };
    let root = match (&command, flag) {
        (Command::Report(a), None) => a.from.join("report"),
        (_, flag) => resolve_out_dir(flag.as_deref()),
    };

    let started = timestamp();
    let mut out = OutputDir::create(root)?;
    let record = match &command {
        Command::Estimate(a) => commands::estimate::run(a, &mut out)?,
        Command::Posterior(a) => commands::posterior::run(a, &mut out)?,
        Command::Simulate(a) => commands::simulate::run(a, &mut out)?,
        Command::Report(a) => commands::report::run(a, &mut out)?,
        Command::Rerun(_) => unreachable!("manifests never record a rerun"),
    };
    let manifest = RunManifest::new(&command, record.seed, record.inputs, out.digests(), started)?;
    out.write_json(MANIFEST_FILE, &manifest)?;
    let root = out.root().to_path_buf();
    out.commit();
    Ok(root)
}
