fn main() {
    std::process::exit(care_cli::run(std::env::args_os()));
}
