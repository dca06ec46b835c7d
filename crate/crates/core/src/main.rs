fn main() {
    std::process::exit(ctcaps::cli::run(std::env::args_os()));
}
