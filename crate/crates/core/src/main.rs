use std::process::ExitCode;

fn main() -> ExitCode {
    phrase_lm::cli::run(std::env::args_os())
}
