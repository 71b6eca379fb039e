fn main() {
    std::process::exit(morsd::cli::main_with_args(std::env::args_os()));
}
