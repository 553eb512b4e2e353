fn main() {
    std::process::exit(carmm::cli::main_with_args(std::env::args_os()));
}
