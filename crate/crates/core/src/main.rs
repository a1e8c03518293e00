use clap::Parser;

use spike_nvpt::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    let command = cli.command.name();
    if let Err(e) = run(cli) {
        eprintln!("spike-nvpt {command}: {e}");
        std::process::exit(exit_code(&e));
    }
}
