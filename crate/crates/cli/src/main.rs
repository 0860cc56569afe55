fn main() {
    std::process::exit(gkd_cli::run(std::env::args_os()));
}
