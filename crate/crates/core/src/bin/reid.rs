use std::path::PathBuf;

use reid_core::harness::{cli, RUN_ROOT_ENV};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    std::process::exit(cli::run(std::env::args_os(), &root));
}
