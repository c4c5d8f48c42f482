fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MISAPP_LOG", "info")).init();
    std::process::exit(misapp::cli::dispatch(std::env::args_os()));
}
