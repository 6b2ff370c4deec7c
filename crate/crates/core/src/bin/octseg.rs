fn main() {
    std::process::exit(octseg::cli::run_from(std::env::args_os()));
}
