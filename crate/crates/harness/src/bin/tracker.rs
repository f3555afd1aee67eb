use clap::Parser;
use vc_tracker::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("tracker: {e}");
        std::process::exit(1);
    }
}
