fn main() {
    std::process::exit(slfc::cli::main_with_args(std::env::args_os()));
}
