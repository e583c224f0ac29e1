fn main() {
    std::process::exit(fairmimic::cli::run(std::env::args_os()));
}
