fn main() {
    std::process::exit(parmri::cli::run(std::env::args_os()));
}
