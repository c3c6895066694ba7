use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(tumorctl::cli::run_cli(std::env::args_os()))
}
