use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = rht::cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = rht::cli::dispatch(&cli, &mut stdout) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
