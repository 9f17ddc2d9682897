fn main() {
    env_logger::init();
    std::process::exit(latphon::cli::main_entry(std::env::args_os()));
}
