fn main() {
    std::process::exit(turbulux::cli::main_entry());
}
