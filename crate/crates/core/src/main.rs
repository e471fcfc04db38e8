fn main() {
    std::process::exit(certikit::cli::run(std::env::args_os()));
}
