use clap::Parser;

fn main() {
    std::process::exit(gansde_cli::main_with(gansde_cli::Cli::parse()));
}
