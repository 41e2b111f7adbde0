use clap::Parser;

fn main() {
    let cli = sorex::cli::Cli::parse();
    if let Err(e) = sorex::cli::execute(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
