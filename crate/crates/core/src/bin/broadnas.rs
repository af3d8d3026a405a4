fn main() {
    std::process::exit(broadnas::cli::main_with_args(std::env::args_os()));
}
