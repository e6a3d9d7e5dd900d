fn main() {
    std::process::exit(dse_sim::cli::run_cli(std::env::args_os()));
}
