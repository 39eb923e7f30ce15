use std::process::ExitCode;

fn main() -> ExitCode {
    aggmom::experiments::cli_main()
}
