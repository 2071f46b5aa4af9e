fn main() {
    std::process::exit(prpl::cli::main());
}
