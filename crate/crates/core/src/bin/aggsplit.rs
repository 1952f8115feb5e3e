fn main() {
    std::process::exit(aggsplit::cli::main_with_args(std::env::args_os()));
}
