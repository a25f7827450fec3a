use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mks::cli::run(std::env::args_os()))
}
