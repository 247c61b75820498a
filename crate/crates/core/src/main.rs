fn main() {
    std::process::exit(saim::cli::run(std::env::args_os()));
}
