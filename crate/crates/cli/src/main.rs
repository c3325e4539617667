use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = ftm_cli::Cli::parse();
    if let Err(e) = ftm_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(ftm_cli::exit_code(&e));
    }
}
