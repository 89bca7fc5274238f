fn main() {
    std::process::exit(duralign::cli::main())
}
