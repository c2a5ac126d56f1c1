fn main() {
    std::process::exit(ifprune::cli::run(std::env::args_os()));
}
