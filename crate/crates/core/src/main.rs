fn main() {
    std::process::exit(deeptok::cli_main());
}
