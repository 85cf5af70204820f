fn main() {
    std::process::exit(afford_core::cli::run());
}
