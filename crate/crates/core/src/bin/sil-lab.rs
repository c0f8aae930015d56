fn main() {
    std::process::exit(sil_core::cli::main_with_args(std::env::args_os()));
}
