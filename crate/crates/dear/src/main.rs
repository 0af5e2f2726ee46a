fn main() {
    std::process::exit(dear::cli::run(std::env::args_os()));
}
