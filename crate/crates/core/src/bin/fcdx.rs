fn main() {
    std::process::exit(fcdx::cli::run(std::env::args_os()));
}
