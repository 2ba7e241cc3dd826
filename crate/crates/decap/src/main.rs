fn main() {
    std::process::exit(decap::cli::run());
}
