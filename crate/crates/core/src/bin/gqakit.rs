fn main() {
    std::process::exit(gqakit::cli::main_with_args(std::env::args().collect()));
}
