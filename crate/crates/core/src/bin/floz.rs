fn main() {
    std::process::exit(floz_core::cli::main_with_args(std::env::args_os()));
}
