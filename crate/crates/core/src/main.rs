fn main() {
    gmc::cli::init_logging();
    std::process::exit(gmc::cli::run(std::env::args_os()));
}
