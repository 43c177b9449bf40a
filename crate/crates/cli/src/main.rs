use std::process::ExitCode;

fn main() -> ExitCode {
    flowtrace_cli::run(std::env::args_os())
}
