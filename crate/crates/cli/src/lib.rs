//! Library side of the `detdisc` binary, exposed so tests can drive commands
//! in-process.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use args::{Cli, Command};
use error::{CliError, CliResult, EXIT_OK};
use manifest::{RunManifest, RunRecord};

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn dispatch(command: &Command, rec: &mut RunRecord) -> CliResult<()> {
    match command {
        Command::GenSynth(a) => commands::gen_synth(a, rec),
        Command::Train(a) => commands::train(a, rec),
        Command::Mine(a) => commands::mine(a, rec),
        Command::Eval(a) => commands::eval(a, rec),
        Command::GradCheck(a) => commands::grad_check(a, rec),
    }
}

/// Runs one command inside a dedicated thread pool and writes its manifest,
/// whether or not the command succeeds. Returns the process exit code.
pub fn run(cli: &Cli, argv: Vec<String>) -> u8 {
    let started_at = now();
    let mut rec = RunRecord::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Input(format!("thread pool: {e}")));
    let (threads, result) = match pool {
        Ok(pool) => (
            pool.current_num_threads(),
            pool.install(|| dispatch(&cli.command, &mut rec)),
        ),
        Err(e) => (0, Err(e)),
    };
    let exit_code = match &result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: cli.command.name().to_string(),
        argv,
        config_path: rec.config_path.clone(),
        config: rec.config.clone(),
        seed: rec.seed,
        threads,
        inputs: RunRecord::records(&rec.inputs),
        outputs: RunRecord::records(&rec.outputs),
        started_at,
        finished_at: now(),
        exit_code,
        error: result.as_ref().err().map(ToString::to_string),
    };
    if let Err(e) = manifest::write(cli.command.out_dir(), &manifest) {
        eprintln!("error: could not write manifest: {e}");
        return exit_code.max(error::EXIT_INPUT);
    }
    exit_code
}
