fn main() {
    std::process::exit(mtasr::cli::main_with_args(std::env::args_os()));
}
