fn main() {
    std::process::exit(dynadmm::cli::run(std::env::args_os()));
}
