mod commands;
mod error;
mod options;

use clap::Parser;

use options::{Cli, Command};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDEINI_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = cli.command.config().resolve().and_then(|cfg| match &cli.command {
        Command::Train(_) => commands::train(&cfg),
        Command::Split(_) => commands::split(&cfg),
        Command::Infer(_) => commands::infer(&cfg),
        Command::Bench(_) => commands::bench(&cfg),
        Command::Keygen(_) => commands::keygen_cmd(&cfg),
    });
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
