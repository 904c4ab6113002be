use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(retvid::cli::cli_main(std::env::args_os()))
}
