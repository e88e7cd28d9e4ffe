fn main() {
    std::process::exit(ibau::cli::run());
}
