fn main() {
    std::process::exit(csvit_cli::run(std::env::args_os()));
}
