fn main() {
    std::process::exit(flowlab::cli::run());
}
