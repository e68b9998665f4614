fn main() {
    std::process::exit(pixfuse::cli::run(std::env::args_os()));
}
