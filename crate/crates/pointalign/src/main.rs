fn main() {
    std::process::exit(pointalign::cli::run());
}
