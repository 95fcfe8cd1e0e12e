use std::process::ExitCode;

fn main() -> ExitCode {
    fogdet::cli::main_entry()
}
