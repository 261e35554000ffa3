use std::process::ExitCode;

fn main() -> ExitCode {
    latentguard::cli::main_with_args(std::env::args_os())
}
