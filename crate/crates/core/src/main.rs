use clap::Parser;
use env_logger::Env;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(Env::new().filter_or("DCF_LOG", "info")).init();
    dcf::cli::run(dcf::cli::Cli::parse())
}
