fn main() {
    std::process::exit(blrp::cli::main_with_args(std::env::args_os()));
}
