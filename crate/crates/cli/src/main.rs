fn main() {
    std::process::exit(acenet_cli::run(std::env::args_os()));
}
