fn main() {
    std::process::exit(rainbow_density::cli::main_with_args(std::env::args_os()));
}
