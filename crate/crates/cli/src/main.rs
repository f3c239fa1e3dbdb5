use clap::Parser;

fn main() {
    let cli = qt_cli::Cli::parse();
    if let Err(err) = qt_cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(qt_cli::exit_code(&err));
    }
}
