use clap::Parser;

fn main() {
    let cli = blochspec_core::cli::Cli::parse();
    std::process::exit(blochspec_core::cli::run(cli));
}
