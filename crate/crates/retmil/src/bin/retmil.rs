fn main() {
    std::process::exit(retmil::cli::run());
}
