fn main() {
    std::process::exit(darr::cli::run(std::env::args_os()));
}
