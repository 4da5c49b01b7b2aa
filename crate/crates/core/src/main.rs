use clap::Parser;

fn main() {
    let cli = crowdcount::cli::Cli::parse();
    if let Err(e) = crowdcount::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
