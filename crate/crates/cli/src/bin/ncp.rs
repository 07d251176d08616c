fn main() {
    std::process::exit(ncp_cli::run(std::env::args_os()));
}
