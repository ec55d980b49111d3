fn main() {
    std::process::exit(mcmot::cli::run());
}
