fn main() {
    std::process::exit(cogedit_gateway::cli::run(std::env::args_os()));
}
