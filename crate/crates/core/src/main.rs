fn main() {
    std::process::exit(uniclr::cli::run(std::env::args_os()));
}
