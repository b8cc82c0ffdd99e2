fn main() {
    std::process::exit(projlearn::cli::run(std::env::args_os()));
}
