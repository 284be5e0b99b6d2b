use std::process::ExitCode;

fn main() -> ExitCode {
    strata_sgd::cli::run_cli(std::env::args_os())
}
