use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = gsmppi_cli::Args::parse();
    std::process::exit(gsmppi_cli::main_with_args(args));
}
