fn main() {
    std::process::exit(scenario_cli::run(std::env::args_os()));
}
