fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PGEN_LOG", "info")).init();
    std::process::exit(pgen_cli::run(std::env::args_os()));
}
