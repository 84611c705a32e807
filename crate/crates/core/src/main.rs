fn main() {
    std::process::exit(drsl::cli::run(std::env::args_os()));
}
