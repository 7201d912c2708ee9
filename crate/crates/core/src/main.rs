fn main() {
    std::process::exit(cabb::cli::main_with_args(std::env::args_os()));
}
