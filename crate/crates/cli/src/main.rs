use clap::Parser;

fn main() {
    let cli = lcid_cli::cli::Cli::parse();
    if let Err(e) = lcid_cli::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
