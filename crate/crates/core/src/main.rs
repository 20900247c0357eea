fn main() {
    std::process::exit(diffrestore::cli::run(std::env::args_os()));
}
