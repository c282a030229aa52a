use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(drlogit_cli::run(std::env::args_os()))
}
