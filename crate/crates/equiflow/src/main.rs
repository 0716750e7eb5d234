use clap::Parser;

fn main() {
    let cli = equiflow::cli::Cli::parse();
    std::process::exit(equiflow::cli::run(cli));
}
