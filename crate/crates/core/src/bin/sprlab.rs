fn main() {
    std::process::exit(sprlab::cli::run(std::env::args_os()));
}
