fn main() {
    std::process::exit(ot_reweight::cli::run_cli(std::env::args_os()));
}
