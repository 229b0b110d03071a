fn main() {
    std::process::exit(vmae::cli::main_with_args(std::env::args_os()));
}
