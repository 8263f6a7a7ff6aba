fn main() {
    std::process::exit(nrx::cli::run(std::env::args_os()));
}
