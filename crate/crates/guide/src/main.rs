use clap::Parser;

fn main() {
    let cli = guide::cli::Cli::parse();
    if let Err(e) = guide::cli::run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}
