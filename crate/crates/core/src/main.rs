fn main() {
    std::process::exit(hailline::cli::main_with_args(std::env::args_os()));
}
