fn main() {
    std::process::exit(ceidm::cli::run(std::env::args_os()));
}
