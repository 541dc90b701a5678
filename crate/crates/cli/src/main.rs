use clap::Parser;

fn main() {
    std::process::exit(cbamnet_cli::run(cbamnet_cli::Cli::parse()));
}
