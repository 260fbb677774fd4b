fn main() {
    std::process::exit(yaart::cli::run(std::env::args()));
}
