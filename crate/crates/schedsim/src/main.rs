use std::process::ExitCode;

fn main() -> ExitCode {
    schedsim::cli::main()
}
