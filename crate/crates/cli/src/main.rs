use std::process::ExitCode;

fn main() -> ExitCode {
    match advgrad_cli::run_args(std::env::args_os().skip(1)) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
