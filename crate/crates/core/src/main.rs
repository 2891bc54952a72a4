fn main() {
    std::process::exit(trex::cli::run(std::env::args_os()));
}
