fn main() {
    std::process::exit(benchsel::cli::run(std::env::args_os()));
}
