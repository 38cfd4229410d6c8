fn main() {
    std::process::exit(sefoss_cli::run(std::env::args_os()));
}
