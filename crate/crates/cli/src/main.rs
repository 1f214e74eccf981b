fn main() {
    std::process::exit(xtrial_cli::run(std::env::args_os()));
}
