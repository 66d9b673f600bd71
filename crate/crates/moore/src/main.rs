fn main() {
    std::process::exit(moore::cli::run());
}
