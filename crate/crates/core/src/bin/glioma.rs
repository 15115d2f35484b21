fn main() {
    std::process::exit(glioma_core::cli::main_with_args(std::env::args_os()));
}
