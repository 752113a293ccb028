fn main() {
    std::process::exit(causalid::cli::main_with_args(std::env::args_os()));
}
