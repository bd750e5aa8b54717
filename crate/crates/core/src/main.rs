fn main() {
    std::process::exit(r2a_core::cli::main());
}
