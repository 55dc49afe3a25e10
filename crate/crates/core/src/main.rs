fn main() {
    std::process::exit(adauto::cli_main());
}
