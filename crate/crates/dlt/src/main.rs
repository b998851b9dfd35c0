fn main() {
    std::process::exit(dlt::cli::run(std::env::args_os()));
}
