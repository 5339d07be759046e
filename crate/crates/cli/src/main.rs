fn main() {
    std::process::exit(hiproto_cli::run(std::env::args_os()));
}
