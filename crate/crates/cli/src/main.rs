//! `softcbm`: generate data, train, intervene, evaluate and serve.
//!
//! Every subcommand accepts `--config file.json` whose keys mirror its flags;
//! explicit flags override the file. Failures print one JSON line to stderr
//! and exit with status 1.

mod args;
mod commands;
mod error;

use clap::Parser;

use crate::error::CliError;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let result = args::expand_config(argv).and_then(|argv| match args::Cli::try_parse_from(argv) {
        Ok(cli) => commands::run(cli.command),
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => Err(CliError::Usage(e.to_string().lines().next().unwrap_or("bad arguments").to_string())),
    });
    if let Err(e) = result {
        eprintln!("{}", e.to_json_line());
        std::process::exit(1);
    }
}
