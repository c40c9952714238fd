fn main() {
    std::process::exit(treecount::cli::run_cli(std::env::args().collect()));
}
