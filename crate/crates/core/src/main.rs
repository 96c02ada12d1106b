fn main() {
    std::process::exit(knotsel::cli::run_cli(std::env::args_os()));
}
