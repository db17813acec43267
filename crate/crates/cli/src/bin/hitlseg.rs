fn main() {
    std::process::exit(hitlseg_cli::run(std::env::args_os()));
}
