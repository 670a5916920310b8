fn main() {
    std::process::exit(smoe::cli::main());
}
