use std::io;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use audiofab::gateway::cli::{run, Cli};

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("AUDIOFAB_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let code = run(cli, &mut io::stdin().lock(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
