//! Command-line front end: reproducible batch runs of dataset synthesis,
//! calibration, prediction, evaluation, tuning, and diagnostics.

pub mod commands;
pub mod mlp;

use clap::Parser;

/// Exit status contract: 0 success, 1 usage error, 2 data error.
pub fn run(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match commands::Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(commands::CliError::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
