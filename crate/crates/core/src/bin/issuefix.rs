use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = issuefix_core::cli::Cli::parse();
    std::process::exit(issuefix_core::cli::run(cli));
}
