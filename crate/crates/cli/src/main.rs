fn main() {
    std::process::exit(clockbarrier_cli::run(std::env::args_os()));
}
