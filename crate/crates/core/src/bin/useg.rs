fn main() {
    std::process::exit(useg::cli::main_with_args(std::env::args_os()));
}
