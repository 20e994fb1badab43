fn main() {
    std::process::exit(navmem_cli::run(std::env::args_os()));
}
