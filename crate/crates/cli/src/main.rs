fn main() {
    std::process::exit(tsdm_cli::run(std::env::args_os()));
}
