fn main() {
    std::process::exit(mibounds_cli::run(std::env::args_os()));
}
