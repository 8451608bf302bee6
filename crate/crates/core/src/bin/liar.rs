fn main() {
    std::process::exit(liar_core::cli::main_with_args(std::env::args_os()));
}
