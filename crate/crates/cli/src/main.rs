use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mgp_cli::Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match mgp_cli::run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(mgp_cli::exit_code(&e))
        }
    }
}
