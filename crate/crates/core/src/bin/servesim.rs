use clap::Parser;
use servesim::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("servesim: {e}");
        std::process::exit(1);
    }
}
