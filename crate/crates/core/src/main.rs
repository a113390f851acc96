fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TOXSPACE_LOG", "warn")).init();
    std::process::exit(toxspace::cli::run(std::env::args_os()));
}
