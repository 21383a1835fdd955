fn main() {
    std::process::exit(sos_core::cli::main());
}
