fn main() {
    std::process::exit(hybridfem::cli::main_entry(std::env::args()));
}
