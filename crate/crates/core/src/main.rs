use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ambirate::cli::main_with_args(std::env::args()) as u8)
}
