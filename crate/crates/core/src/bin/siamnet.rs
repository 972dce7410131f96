fn main() {
    std::process::exit(siamnet::cli::main_with_args(std::env::args_os()));
}
