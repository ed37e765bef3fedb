fn main() {
    std::process::exit(wastebot_cli::run(std::env::args_os()));
}
