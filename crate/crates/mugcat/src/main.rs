fn main() {
    std::process::exit(mugcat::cli::main_with_args(std::env::args_os().collect()));
}
