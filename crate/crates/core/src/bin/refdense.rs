fn main() {
    std::process::exit(refdense::cli::run(std::env::args_os()));
}
