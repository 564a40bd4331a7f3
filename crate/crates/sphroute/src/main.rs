fn main() {
    std::process::exit(sphroute::cli::run(std::env::args_os()));
}
