use std::process::ExitCode;

fn main() -> ExitCode {
    filmseg::cli::main_with_args(std::env::args_os())
}
