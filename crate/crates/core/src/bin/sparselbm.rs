fn main() {
    std::process::exit(sparselbm::cli::run_command(std::env::args_os()));
}
