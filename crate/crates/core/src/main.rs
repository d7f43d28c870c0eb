fn main() {
    std::process::exit(worldsim::cli::main_with_args(std::env::args_os()).into());
}
