fn main() {
    std::process::exit(durr::cli::run(std::env::args_os()));
}
