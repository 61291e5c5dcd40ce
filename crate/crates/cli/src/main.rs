use std::process::ExitCode;

use clap::Parser;
use detdisc_cli::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("DETDISC_LOG")
        .init();
    ExitCode::from(detdisc_cli::run(&cli, std::env::args().collect()))
}
