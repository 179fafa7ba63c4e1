fn main() {
    std::process::exit(mfclear::cli::main());
}
