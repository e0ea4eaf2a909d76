use clap::Parser;

fn main() {
    let cli = mvpower::cli::Cli::parse();
    if let Err(e) = mvpower::cli::run(cli) {
        eprintln!("error[{}]: {e}", e.category().label());
        std::process::exit(e.category().exit_code());
    }
}
