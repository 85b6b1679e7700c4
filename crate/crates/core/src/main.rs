fn main() {
    std::process::exit(moase::cli::main_with(std::env::args_os()));
}
