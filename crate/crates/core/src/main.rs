fn main() {
    std::process::exit(bitrunet::cli::run(std::env::args_os()));
}
