fn main() {
    std::process::exit(acute::cli::main());
}
