//! The `dmle-lab` command: experiment matrices over datasets, acquisition
//! functions, selection strategies and estimators, plus the verification
//! suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 run failure, 3 verification
//! failure.

pub mod args;
pub mod config_file;
mod error;
pub mod matrix;

use std::ffi::OsString;

use clap::Parser;
use dmle_core::verify::run_suite;

pub use args::{Cli, Command, RunArgs, VerifyArgs};
pub use error::CliError;
pub use matrix::{execute, RunMatrix};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUN_FAILURE: i32 = 2;
pub const EXIT_VERIFY_FAILURE: i32 = 3;

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match config_file::merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run(args) => run_matrix(*args),
        Command::Verify(args) => verify(args),
    }
}

fn run_matrix(args: RunArgs) -> i32 {
    let out = args::resolve_out_dir(args.out_dir.clone());
    let matrix = match RunMatrix::from_args(&args, out) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return match e {
                CliError::Usage(_) => EXIT_USAGE,
                _ => EXIT_RUN_FAILURE,
            };
        }
    };
    eprintln!(
        "running {} cells on {} workers into {}",
        matrix.cells.len(),
        matrix.workers,
        matrix.out_dir.display()
    );
    match execute(&matrix) {
        Ok(outcome) => {
            print!("{}", outcome.summary());
            if outcome.failures() > 0 {
                EXIT_RUN_FAILURE
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUN_FAILURE
        }
    }
}

fn verify(args: VerifyArgs) -> i32 {
    let suite = args.suite.into();
    let report = match run_suite(suite) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VERIFY_FAILURE;
        }
    };
    let text = report.render();
    print!("{text}");
    let out = args::resolve_out_dir(args.out_dir);
    let path = out.join(format!("verify-{}.txt", suite.name()));
    if let Err(e) = std::fs::create_dir_all(&out).and_then(|_| std::fs::write(&path, &text)) {
        eprintln!("error: cannot write {}: {e}", path.display());
        return EXIT_VERIFY_FAILURE;
    }
    if report.passed() {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILURE
    }
}
