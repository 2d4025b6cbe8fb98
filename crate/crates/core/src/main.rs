fn main() {
    std::process::exit(pball::cli::run(std::env::args_os()));
}
