fn main() {
    std::process::exit(facescale_cli::run_cli(std::env::args_os()));
}
