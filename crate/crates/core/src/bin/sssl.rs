fn main() {
    std::process::exit(sssl_core::cli::run(std::env::args_os()));
}
