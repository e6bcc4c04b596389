fn main() {
    std::process::exit(tinyclone::cli::run(std::env::args_os()));
}
