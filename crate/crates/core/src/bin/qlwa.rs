use std::process::ExitCode;

fn main() -> ExitCode {
    qlwa::cli::run(std::env::args_os())
}
