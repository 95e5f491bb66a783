use clap::Parser;

fn main() {
    let cli = kmspc::app::Cli::parse();
    if let Err(e) = kmspc::app::execute(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
