fn main() {
    std::process::exit(tcf::cli::run_cli(std::env::args()));
}
