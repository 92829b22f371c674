use clap::Parser;

fn main() {
    let cli = itfa_cli::commands::Cli::parse();
    if let Err(e) = itfa_cli::commands::run(cli) {
        eprintln!("error: {e}");
        if let itfa_cli::Error::Audit(v) = &e {
            if let Ok(json) = serde_json::to_string(v) {
                eprintln!("{json}");
            }
        }
        std::process::exit(e.exit_code());
    }
}
