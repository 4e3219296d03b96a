use clap::Parser;
use nesslsi::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
