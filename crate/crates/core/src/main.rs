fn main() {
    std::process::exit(mmvc::cli::run(std::env::args_os()));
}
