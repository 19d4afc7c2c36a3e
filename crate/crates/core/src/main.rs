use clap::Parser;

use stable_schrodinger::run::{run_cli, Cli};

fn main() {
    std::process::exit(run_cli(Cli::parse()));
}
