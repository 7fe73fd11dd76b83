use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use sicdn_cli::{exit_code, resolve_config, run, Cli, SEED_ENV};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let result = resolve_config(&cli.common, env_seed.as_deref())
        .and_then(|cfg| run(&cli.command, &cfg, &mut std::io::stdout()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
