fn main() {
    std::process::exit(scan_core::cli::run(std::env::args_os()));
}
