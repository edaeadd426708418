fn main() {
    std::process::exit(delst_core::cli::run(std::env::args()));
}
