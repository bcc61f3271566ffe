use std::process::ExitCode;

fn main() -> ExitCode {
    evlight_harness::cli::main()
}
