fn main() {
    std::process::exit(posenorm_cli::run(std::env::args_os()));
}
