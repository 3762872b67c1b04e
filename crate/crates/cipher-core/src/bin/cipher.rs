fn main() {
    std::process::exit(cipher_core::cli::main());
}
