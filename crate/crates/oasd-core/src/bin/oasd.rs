use clap::Parser;
use oasd_core::cli::{run, CliArgs};

fn main() {
    let args = CliArgs::parse();
    std::process::exit(run(args));
}
