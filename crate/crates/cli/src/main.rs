use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PYREXPOSE_LOG", "info")).init();
    let cli = pyrexpose_cli::Cli::parse();
    if let Err(e) = pyrexpose_cli::run(cli) {
        let msg = format!("{e:#}").replace('\n', " ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
