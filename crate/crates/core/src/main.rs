fn main() {
    std::process::exit(sdebridge::cli::run());
}
