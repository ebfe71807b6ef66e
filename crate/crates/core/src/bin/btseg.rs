fn main() {
    std::process::exit(btseg::cli::main_with_args(std::env::args_os()));
}
