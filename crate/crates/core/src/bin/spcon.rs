use std::process::ExitCode;

fn main() -> ExitCode {
    match spcon::cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(spcon::cli::exit_code(&e) as u8)
        }
    }
}
