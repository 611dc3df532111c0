fn main() {
    gsog::cli::init_logging();
    std::process::exit(gsog::cli::run(std::env::args_os()));
}
