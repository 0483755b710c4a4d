fn main() {
    std::process::exit(endx::cli::main_with_args(std::env::args_os()));
}
