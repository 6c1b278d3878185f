use std::process::ExitCode;

fn main() -> ExitCode {
    obbdet::cli::main()
}
