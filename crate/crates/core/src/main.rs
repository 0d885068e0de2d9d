fn main() {
    std::process::exit(evidentia::cli::run(std::env::args_os()));
}
