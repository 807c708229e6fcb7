fn main() {
    std::process::exit(yoto::cli::run(std::env::args_os()));
}
