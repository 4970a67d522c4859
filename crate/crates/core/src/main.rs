fn main() {
    std::process::exit(rtgmff::harness::cli::run(std::env::args_os()));
}
