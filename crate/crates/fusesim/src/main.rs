use std::process::ExitCode;

fn main() -> ExitCode {
    fusesim::cli::main()
}
