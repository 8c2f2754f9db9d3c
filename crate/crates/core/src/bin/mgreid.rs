use anyhow::Context;
use clap::Parser;
use mgreid::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = cli.command.name();
    run(cli).with_context(|| format!("{command} failed"))
}
