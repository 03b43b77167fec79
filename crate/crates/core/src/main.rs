fn main() {
    std::process::exit(hexcover::cli::main_with_args(std::env::args_os()));
}
