fn main() {
    std::process::exit(tce::cli::run(std::env::args().skip(1)));
}
