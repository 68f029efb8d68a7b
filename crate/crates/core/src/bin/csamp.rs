use clap::Parser;

use csamp::cli::{exit_code, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = cli.run() {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
