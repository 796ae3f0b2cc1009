use clap::Parser;

fn main() {
    let cli = ttvm::Cli::parse();
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr();
    if let Err(e) = ttvm::execute(&cli, &mut out, &mut err) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
