fn main() {
    std::process::exit(moesim::run_subcommand(std::env::args_os()));
}
