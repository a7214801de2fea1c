use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(laplab_cli::dispatch(std::env::args()) as u8)
}
