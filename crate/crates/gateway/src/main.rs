fn main() {
    std::process::exit(babybear_gateway::cli::run(std::env::args_os()));
}
