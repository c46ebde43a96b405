use clap::Parser;

use audiofab::audiotools::toolproc::{main_with_args, ToolArgs};

fn main() {
    std::process::exit(main_with_args(ToolArgs::parse()));
}
