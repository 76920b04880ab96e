fn main() {
    std::process::exit(enecg_cli::run(std::env::args_os()));
}
