use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = pmm_cli::Cli::parse();
    if let Err(e) = pmm_cli::run(cli) {
        eprintln!("{}", pmm_cli::error_json(&e));
        std::process::exit(1);
    }
}
