fn main() {
    std::process::exit(lfqgen::cli::run(std::env::args_os()));
}
