fn main() {
    std::process::exit(hetsched_cli::main_with_args(std::env::args_os()));
}
