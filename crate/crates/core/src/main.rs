fn main() {
    std::process::exit(centroid_cache::cli::run(std::env::args_os()));
}
