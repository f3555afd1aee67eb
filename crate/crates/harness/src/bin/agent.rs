use clap::Parser;
use vc_agent::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("agent: {e}");
        std::process::exit(1);
    }
}
