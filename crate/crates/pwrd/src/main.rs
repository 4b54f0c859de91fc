fn main() {
    std::process::exit(pwrd::cli::main_with_args(std::env::args().collect()));
}
