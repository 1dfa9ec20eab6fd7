fn main() {
    std::process::exit(cueguide::cli::run(std::env::args_os()));
}
