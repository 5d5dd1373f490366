fn main() {
    std::process::exit(beamsplat::cli::main_entry());
}
