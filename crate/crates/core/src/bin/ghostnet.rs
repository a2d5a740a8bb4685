fn main() {
    std::process::exit(ghostnet::cli::main_with_args(std::env::args_os()));
}
