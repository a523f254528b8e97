fn main() {
    std::process::exit(qbridge::cli::main_with_args(std::env::args_os()));
}
