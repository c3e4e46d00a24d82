fn main() {
    std::process::exit(prefflow::cli::run());
}
