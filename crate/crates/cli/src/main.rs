fn main() {
    std::process::exit(statfuse_cli::run(std::env::args_os()));
}
