fn main() {
    std::process::exit(wmdetect::cli::main_with_args(std::env::args_os()));
}
