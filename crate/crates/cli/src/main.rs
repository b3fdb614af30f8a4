fn main() {
    std::process::exit(kou_sgm_cli::run_cli(std::env::args_os()));
}
