use clap::Parser;

fn main() {
    let cli = edge::cli::Cli::parse();
    if let Err(e) = edge::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
