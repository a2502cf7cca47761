fn main() {
    std::process::exit(verlm_cli::cli_main(std::env::args_os()));
}
