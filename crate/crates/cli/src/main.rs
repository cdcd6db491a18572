mod args;
mod commands;
mod config;
mod error;
mod manifest;
mod serve;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::{CliError, EXIT_USAGE};

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::TrainCae(a) => commands::train_cae(a),
        Command::TrainCls(a) => commands::train_cls(a),
        Command::MakeSurrogate(a) => commands::make_surrogate(a),
        Command::MakeCorpus(a) => commands::make_corpus(a),
        Command::Lens(a) => commands::lens(a),
        Command::Filters(a) => commands::filters(a),
        Command::Serve(a) => serve::serve(a),
    }
}

fn main() -> ExitCode {
    let argv = match config::expand_argv(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
