use clap::Parser;
use hiercomp_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    // Panics escape as exit code 101 by default; report them as internal errors.
    let code = std::panic::catch_unwind(|| run(&cli)).unwrap_or(3);
    std::process::exit(code);
}
