fn main() {
    std::process::exit(gdflow::cli::run_from(std::env::args_os()));
}
