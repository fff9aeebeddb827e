fn main() {
    std::process::exit(gridnav::cli::run());
}
