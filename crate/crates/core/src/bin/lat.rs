fn main() {
    std::process::exit(lat_core::cli::run_from(std::env::args_os()));
}
