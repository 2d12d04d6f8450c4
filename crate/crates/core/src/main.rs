fn main() {
    std::process::exit(flowfilt::cli::main_with_args(std::env::args_os()));
}
