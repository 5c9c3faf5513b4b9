fn main() {
    std::process::exit(razewright_cli::run(std::env::args_os()));
}
