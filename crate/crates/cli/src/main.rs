fn main() {
    std::process::exit(dmle_cli::run(std::env::args_os()));
}
