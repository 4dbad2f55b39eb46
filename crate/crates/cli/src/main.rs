fn main() {
    std::process::exit(didlab_cli::run(std::env::args_os()));
}
