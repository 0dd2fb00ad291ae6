fn main() {
    std::process::exit(lsat_cli::main_with_args(std::env::args_os()));
}
