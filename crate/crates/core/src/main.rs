fn main() {
    std::process::exit(latentft::cli::run(std::env::args()));
}
