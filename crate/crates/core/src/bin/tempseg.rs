fn main() {
    std::process::exit(tempseg::cli::main_with_args(std::env::args_os()));
}
