fn main() {
    std::process::exit(vcboot::cli::run(std::env::args_os()));
}
